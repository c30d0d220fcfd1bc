#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
하위집단 강건성 감사 실행 진입점 (python main.py <명령> ...)
"""

import sys

from subgroup_robustness.cli import main

if __name__ == "__main__":
    sys.exit(main())
