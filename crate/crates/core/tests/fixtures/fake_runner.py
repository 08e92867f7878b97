"""Minimal stand-in for the snippet runner, speaking protocol v1 over JSON
Lines. `--mode` makes it misbehave in specific ways so the orchestrator's
error handling can be exercised."""

import argparse
import json
import sys
import time


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--snippet-file", required=True)
    p.add_argument("--batch-timeout-ms", type=int, required=True)
    p.add_argument("--mode", default="ok")
    args = p.parse_args()

    if args.mode == "silent":
        time.sleep(30)
        return 0
    if args.mode == "garbled-ready":
        print("hello", flush=True)
        return 0

    namespace = {}
    try:
        with open(args.snippet_file) as f:
            code = f.read()
        exec(compile(code, "snippet", "exec"), namespace)
        transform = namespace["transform"]
    except Exception as e:  # noqa: BLE001
        print(json.dumps({"fatal": f"{type(e).__name__}: {e}"}), flush=True)
        return 2

    protocol = 2 if args.mode == "protocol2" else 1
    print(json.dumps({"ready": True, "protocol": protocol}), flush=True)
    if args.mode == "report-budget":
        print(json.dumps({"id": 0, "value": str(args.batch_timeout_ms)}), flush=True)
        return 0

    for n, line in enumerate(sys.stdin):
        msg = json.loads(line)
        if args.mode == "hang":
            time.sleep(30)
        if args.mode == "wrong-id":
            msg["id"] += 1
        if args.mode == "die-after-one" and n == 1:
            return 3
        try:
            out = {"id": msg["id"], "value": str(transform(msg["row"]))}
        except Exception as e:  # noqa: BLE001
            out = {"id": msg["id"], "error": f"{type(e).__name__}: {e}"}
        print(json.dumps(out), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
