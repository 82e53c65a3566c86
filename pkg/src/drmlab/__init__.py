"""Desk-scale lab for discriminant-risk training without domain labels."""

from . import bayes_classifier, datagen, discriminant, distributions, evaluation, numcore, trainer

__all__ = [
    "bayes_classifier",
    "datagen",
    "discriminant",
    "distributions",
    "evaluation",
    "numcore",
    "trainer",
]
