"""Regenerate the bundled seed and witness files."""

from . import DATA_DIR, write_corpora

write_corpora()
print(f"wrote corpora under {DATA_DIR}")
