""" Selective testing of untrusted federated-learning workers. """
