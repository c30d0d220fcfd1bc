# -*- coding: utf-8 -*-
"""β-VAE 교차 하위집단 적대적 강건성 감사"""

__version__ = "0.1.0"
