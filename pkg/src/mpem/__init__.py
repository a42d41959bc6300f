"""MP-EM: compressive-sensing reconstruction of Markov-tree sparse signals."""
