# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Data-to-predictive-control: identification, uncertainty, robust control and MPC."""
from d2pc._package import __version__  # noqa: F401
