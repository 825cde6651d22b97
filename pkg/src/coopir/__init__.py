"""Cooperative multi-tool image restoration at desk scale.

Modules
-------
core       images, seeded PRNG, quality metrics, binary formats
degrade    synthetic degradations and combination tables
grad       small reverse-mode autodiff tape
tools      differentiable classical restoration tools
plansearch exhaustive plan enumeration and multi-metric selection
planner    plan-generating policy trained with group-relative policy optimization
cotrain    end-to-end tool training through composed plans
harness    configuration, run directories and subcommands
"""

__version__ = "0.1.0"
