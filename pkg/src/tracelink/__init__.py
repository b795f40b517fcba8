"""Issue-commit traceability link recovery toolkit.

Data preparation, teacher-student encoder distillation, multi-task
fine-tuning, and a ranking evaluation harness with a TF-IDF baseline.
"""

__version__ = "0.1.0"
