#!/usr/bin/env python3
"""Runs each CLI subcommand on the tiny configs and validates every emitted
JSON file against the schemas in docs/."""

import argparse
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema
from referencing import Registry, Resource


def load_schemas(docs):
    schemas = {}
    for path in sorted(docs.glob("*.schema.json")):
        schemas[path.name] = json.loads(path.read_text())
    registry = Registry().with_resources(
        (name, Resource.from_contents(s)) for name, s in schemas.items()
    )
    return schemas, registry


def run(cmd, expect=0):
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != expect:
        sys.exit(f"{' '.join(map(str, cmd))}: exit {proc.returncode}, expected {expect}\n{proc.stderr}")
    return proc.stdout


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--cli", required=True)
    parser.add_argument("--root", required=True)
    args = parser.parse_args()
    root = pathlib.Path(args.root)
    schemas, registry = load_schemas(root / "docs")

    def check(schema, doc, what):
        validator = jsonschema.Draft202012Validator(schemas[schema], registry=registry)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
        if errors:
            sys.exit(f"{what} violates {schema}: {errors[0].message} at {list(errors[0].path)}")
        print(f"ok  {what}  ({schema})")

    for cfg in sorted((root / "configs").glob("*.json")):
        check("config.schema.json", json.loads(cfg.read_text()), cfg.name)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        cli = args.cli
        run([cli, "train", root / "configs/tiny_lm_kernel.json", "--out", tmp / "run",
             "--set", "optimizer.max_steps=20", "--set", "train.eval_every=10",
             "--set", "train.checkpoint_every=10", "--quiet"])
        for line in (tmp / "run/metrics.jsonl").read_text().splitlines():
            check("metrics.schema.json", json.loads(line), "metrics.jsonl record")
        check("config.schema.json", json.loads((tmp / "run/config.resolved.json").read_text()),
              "config.resolved.json")
        for manifest in sorted((tmp / "run").glob("*.manifest.json")):
            check("manifest.schema.json", json.loads(manifest.read_text()), manifest.name)

        ckpt = tmp / "run/checkpoint.bin"
        check("eval.schema.json", json.loads(run([cli, "eval", ckpt])), "eval report")

        run([cli, "attn-dump", ckpt, "--out", tmp / "dump", "--dense-oracle"])
        check("attention.schema.json", json.loads((tmp / "dump/attention.json").read_text()),
              "attention.json")
        check("pooling.schema.json", json.loads((tmp / "dump/pooling.json").read_text()),
              "pooling.json")

        check("parity_report.schema.json",
              json.loads(run([cli, "parity-check", "--instances", "5"])), "parity report")
        check("parity_report.schema.json",
              json.loads(run([cli, "parity-check", "--instances", "5", "--no-models",
                              "--inject-fault", "scaling"], expect=1)),
              "parity report (fault injected)")
        check("grad_check_report.schema.json",
              json.loads(run([cli, "grad-check", root / "configs/tiny_lm_kernel.json"])),
              "grad-check report")


if __name__ == "__main__":
    main()
