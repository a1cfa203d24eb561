"""fedrec toolkit CLI (``fedrec`` command)."""
