"""Rowhammer-aware remote attestation.

A prover records PRAC alert and machine-check measurements into a
software-TPM hash chain with an encrypted log; a verifier challenges it and
classifies it as compromised or uncompromised.
"""

__version__ = "0.1.0"
