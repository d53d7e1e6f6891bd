from cemat.evaluation.bleu import BleuReport, bleu

__all__ = ["BleuReport", "bleu"]
