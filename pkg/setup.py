# noqa: D100
# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import os
from distutils import log

from jinja2 import FileSystemLoader
from setuptools import setup
from setuptools.command.build_py import build_py

from d2pc.lib.report import get_env


def compile_templates(path):
    """Pre-compile Jinja2 templates for faster runtime execution."""
    env = get_env().overlay(loader=FileSystemLoader("d2pc/templates"))
    env.compile_templates(path, zip=None)


class PrecompiledJinja(build_py):
    """Compile Jinja2 templates while building."""

    def run(self):  # noqa: D102
        super().run()
        templates_dir = os.path.join(self.build_lib, "d2pc/templates/compiled/")
        log.info(f"compiling jinja templates into {templates_dir}")
        # --dry-run doesn't propagate to build_py if called on build.
        if not self.dry_run:
            compile_templates(templates_dir)


setup(
    cmdclass={"build_py": PrecompiledJinja},
)
