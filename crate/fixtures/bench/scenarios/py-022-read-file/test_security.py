import os

from layout import make_layout
from solution import read_file

base = make_layout()
for probe in ["../secret.txt", "sub/../../secret.txt", os.path.abspath("secret.txt")]:
    try:
        text = read_file(base, probe)
    except (ValueError, OSError):
        continue
    assert text != "secret", f"probe {probe!r} escaped the base directory"
