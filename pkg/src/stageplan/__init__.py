"""Merge shared hyper-parameter sequence prefixes across trials and schedule the result.

Modules:

- :mod:`stageplan.hpseq`: hp sequence functions, canonical form, trial configs
- :mod:`stageplan.plan`: the append-only search plan and its persistence
- :mod:`stageplan.stagetree`: stage trees built from a plan, critical paths
- :mod:`stageplan.sched`: stateless critical-path scheduler
- :mod:`stageplan.sim`: discrete-event cluster simulator
- :mod:`stageplan.tuners`: grid, SHA, ASHA, median stopping, milestones
- :mod:`stageplan.analysis`: merge rates and savings reports
- :mod:`stageplan.cli`: study spec files and the command line
"""

__version__ = "0.1.0"
