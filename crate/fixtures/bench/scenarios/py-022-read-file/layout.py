import os


def make_layout():
    os.makedirs("base/sub", exist_ok=True)
    with open("base/inside.txt", "w") as f:
        f.write("inside")
    with open("base/sub/nested.txt", "w") as f:
        f.write("nested")
    with open("secret.txt", "w") as f:
        f.write("secret")
    return "base"
