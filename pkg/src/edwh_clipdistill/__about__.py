"""
This file stores the package version.
"""

# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT

__version__ = "0.1.0"
