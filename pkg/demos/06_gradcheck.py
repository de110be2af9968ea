"""
Finite-difference gradient check
================================

Every primitive, every layer and the whole small model in float64.
"""
from eegmtl.gradcheck import run_suite

for report in run_suite():
    for line in report.lines():
        print(line)
