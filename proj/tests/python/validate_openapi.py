"""Checks recorded API responses against the published OpenAPI document.

usage: validate_openapi.py OPENAPI_JSON RESPONSES_JSON
"""

import json
import sys
from urllib.parse import quote

from jsonschema import Draft202012Validator
from referencing import Registry, Resource
from referencing.jsonschema import DRAFT202012

BASE = "urn:buildtwin:openapi"


def pointer(*parts):
    return "/" + "/".join(quote(str(p).replace("~", "~0").replace("/", "~1"), safe="") for p in parts)


def main(openapi_path, responses_path):
    with open(openapi_path) as f:
        doc = json.load(f)
    with open(responses_path) as f:
        entries = json.load(f)

    registry = Registry().with_resource(BASE, Resource.from_contents(doc, default_specification=DRAFT202012))
    Draft202012Validator.check_schema({"$ref": BASE + "#/components/schemas/Error"})
    for name, schema in doc["components"]["schemas"].items():
        Draft202012Validator.check_schema(schema)

    def validator(ref):
        return Draft202012Validator({"$ref": BASE + "#" + ref}, registry=registry)

    failures = []
    seen = set()
    for e in entries:
        method, route, status, body = e["method"].lower(), e["route"], str(e["status"]), e["body"]
        op = doc["paths"].get(route, {}).get(method)
        if op is None:
            if int(status) < 400:
                failures.append(f"{method.upper()} {route}: undocumented route answered {status}")
                continue
            ref = "/components/schemas/Error"
        else:
            seen.add((route, method))
            response = op["responses"].get(status)
            if response is None:
                failures.append(f"{method.upper()} {route}: status {status} is not documented")
                continue
            if "application/json" not in response.get("content", {}):
                failures.append(f"{method.upper()} {route}: {status} is documented without a JSON body")
                continue
            ref = pointer("paths", route, method, "responses", status, "content", "application/json", "schema")
        for err in validator(ref).iter_errors(body):
            path = "/".join(str(p) for p in err.absolute_path)
            failures.append(f"{method.upper()} {route} {status} at /{path}: {err.message[:200]}")

    documented = {
        (route, method)
        for route, item in doc["paths"].items()
        for method, op in item.items()
        if any("application/json" in r.get("content", {}) for r in op.get("responses", {}).values())
    }
    for route, method in sorted(documented - seen):
        failures.append(f"{method.upper()} {route}: no recorded response")

    for f in failures:
        print("FAIL", f)
    print(f"{len(entries)} responses checked, {len(seen)} operations covered, {len(failures)} problems")
    return 1 if failures else 0


if __name__ == "__main__":
    if len(sys.argv) != 3:
        print(__doc__)
        sys.exit(2)
    sys.exit(main(sys.argv[1], sys.argv[2]))
