#!/usr/bin/env python3
"""Check that a samdkif output directory is fully described by its manifests.

Every file under the directory (manifests aside) must be listed as an output
of some manifest, every listed output must exist, and its recorded FNV-1a
hash must match the bytes on disk.

    audit_manifests.py RUN_DIR
    audit_manifests.py --run-smoke SAMDKIF CONFIG RUN_DIR   # run the pipeline first
"""

import argparse
import json
import pathlib
import shutil
import subprocess
import sys

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_hex(data: bytes) -> str:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def run_smoke(cli: str, config: str, out: pathlib.Path) -> None:
    shutil.rmtree(out, ignore_errors=True)
    common = ["--config", config, "--out", str(out), "-q"]
    for args in (["pretrain"], ["train-skill"], ["gen-data"], ["adapt"], ["fuse"],
                 ["eval", "--model", "base"], ["eval", "--model", "fused"],
                 ["sweep-skills", "--k", "1..2"]):
        subprocess.run([cli, *args, *common], check=True)


def audit(run_dir: pathlib.Path) -> list[str]:
    problems = []
    manifests = sorted(run_dir.glob("manifest_*.json"))
    if not manifests:
        return [f"no manifests in {run_dir}"]
    listed = {}
    for m in manifests:
        doc = json.loads(m.read_text())
        for key in ("command", "config_hash", "seed", "inputs", "outputs", "config"):
            if key not in doc:
                problems.append(f"{m.name}: missing '{key}'")
        for entry in doc.get("outputs", []):
            path = run_dir / entry["path"]
            if not path.is_file():
                problems.append(f"{m.name}: output {entry['path']} does not exist")
                continue
            # A later command may legitimately rewrite a shared file, so only
            # the newest manifest's hash has to match.
            listed.setdefault(entry["path"], []).append((m.stat().st_mtime, m.name, entry["fnv1a"]))
    for rel, claims in listed.items():
        actual = fnv1a_hex((run_dir / rel).read_bytes())
        _, name, recorded = max(claims)
        if recorded != actual:
            problems.append(f"{name}: hash of {rel} is {actual}, manifest says {recorded}")
    for path in sorted(p for p in run_dir.rglob("*") if p.is_file()):
        rel = path.relative_to(run_dir).as_posix()
        if path.parent == run_dir and path.name.startswith("manifest_"):
            continue
        if rel not in listed:
            problems.append(f"{rel} is not listed by any manifest")
    return problems


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-smoke", nargs=2, metavar=("SAMDKIF", "CONFIG"))
    ap.add_argument("run_dir", type=pathlib.Path)
    args = ap.parse_args()
    if args.run_smoke:
        run_smoke(args.run_smoke[0], args.run_smoke[1], args.run_dir)
    problems = audit(args.run_dir)
    for p in problems:
        print(p)
    print(f"{args.run_dir}: {'OK' if not problems else f'{len(problems)} problem(s)'}")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
