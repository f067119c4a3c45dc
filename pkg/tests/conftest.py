import os

os.environ["TESTING"] = "1"
os.environ.setdefault("PERPETUA_QUICK_FACTOR", "10")
