"""Validate shipped configs against the schema, and check that the schema rejects known-bad documents."""
import json
import pathlib
import sys

import jsonschema

root = pathlib.Path(sys.argv[1])
schema = json.loads((root / "docs" / "config.schema.json").read_text())
jsonschema.Draft202012Validator.check_schema(schema)
validator = jsonschema.Draft202012Validator(schema)

failures = 0
for path in sorted((root / "configs").glob("*.json")):
    errors = list(validator.iter_errors(json.loads(path.read_text())))
    for e in errors:
        print(f"{path.name}: {e.message}")
    failures += bool(errors)

bad = [{"epoch": 3}, {"eta": -1}, {"seeds": [1, -2]}, {"student": {"bn_mode": "both"}},
       {"teacher": {"widths": [5]}}, {"thm5": {"mode": "fast"}}]
for doc in bad:
    if validator.is_valid(doc):
        print(f"schema accepted a bad document: {doc}")
        failures += 1

print(f"{failures} failure(s)")
sys.exit(1 if failures else 0)
