# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Render text reports from the package's Jinja2 templates."""
from __future__ import annotations

import math
import os
from functools import lru_cache
from typing import Any, TextIO

from jinja2 import (
    ChoiceLoader,
    Environment,
    FileSystemLoader,
    ModuleLoader,
    StrictUndefined,
)


def _fmt(value: Any, spec: str = ".4g") -> str:
    if value is None:
        return "-"
    value = float(value)
    if math.isnan(value):
        return "-"
    return format(value, spec)


@lru_cache(maxsize=None)
def get_env() -> Environment:
    """Return the shared template environment."""
    # This package should not run from an archive, so `__file__` is defined.
    package_dir = os.path.dirname(os.path.dirname(__file__))
    raw_templates_dir = os.path.join(package_dir, "templates")
    precompiled_templates_dir = os.path.join(raw_templates_dir, "compiled")
    env = Environment(
        loader=ChoiceLoader(
            [
                ModuleLoader(precompiled_templates_dir),
                # `PackageLoader` imports `pkg_resources`, which is slow.
                FileSystemLoader(raw_templates_dir),
            ]
        ),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    env.filters["fmt"] = _fmt
    return env


def render(template_name: str, stream: TextIO, **template_vars: Any) -> None:
    """Render `template_name` into `stream`."""
    get_env().get_template(template_name).stream(template_vars).dump(stream)
