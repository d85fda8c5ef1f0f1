# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Miscellaneous package information to be used in setup.py and throughout package."""
__version__ = "0.1.0"
