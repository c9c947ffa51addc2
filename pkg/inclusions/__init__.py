# InclusionSentinel Package
