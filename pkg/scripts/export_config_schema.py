"""Regenerate schemas/config.schema.json from the configuration models."""

import json
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.config import config_schema

TARGET = os.path.join(os.path.dirname(__file__), "..", "schemas", "config.schema.json")


def export_schema():
    with open(TARGET, "w", encoding="utf-8") as handle:
        json.dump(config_schema(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"Wrote {os.path.abspath(TARGET)}")


if __name__ == "__main__":
    export_schema()
