# Utilities: seeds, atomic file IO, progress bars
