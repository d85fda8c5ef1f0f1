# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Library behind the `d2pc` pipeline."""
