"""Planning interventions for restless bandits whose arms are not Markov."""

__version__ = "0.1.0"
