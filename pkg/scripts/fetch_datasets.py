"""Rebuild the UCI CSV files under data/ from copies bundled in PyPI sdists/wheels.

The sandbox has no general internet access, only a package index, so the
datasets are pulled out of packages that happen to ship them:

  Orange 2.7.8 sdist  -> voting.tab, crx.tab, imports-85.tab
  responsibly wheel   -> adult.data, adult.test

Run from the repository root:  python scripts/fetch_datasets.py
"""
import argparse
import csv
import io
import re
import statistics
import tarfile
import tempfile
import urllib.parse
import urllib.request
import zipfile
from collections import Counter
from pathlib import Path

SIMPLE_INDEX = "https://pypi.org/simple/{name}/"
MISSING = "?"
ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]


def fetch_release_file(name, version, suffix, dest):
    # pip cannot download the Orange 2 sdist (its metadata step fails on Python 3),
    # so read the simple index directly
    index = SIMPLE_INDEX.format(name=name.lower())
    with urllib.request.urlopen(index) as r:
        page = r.read().decode("utf-8")
    hrefs = re.findall(r'href="([^"#]+)', page)
    href = next(h for h in hrefs if f"-{version}" in h and h.endswith(suffix))
    url = urllib.parse.urljoin(index, href)
    path = dest / url.rsplit("/", 1)[1]
    urllib.request.urlretrieve(url, path)
    return path


def read_tab(text):
    """Parse an Orange .tab file: header, type row, flag row, then data."""
    lines = text.splitlines()
    header = [h.strip() for h in lines[0].split("\t")]
    rows = []
    for line in lines[3:]:
        if not line.strip():
            continue
        row = [v.strip() for v in line.split("\t")]
        row = [MISSING if v in ("", "?") else v for v in row]
        rows.append(row)
    return header, rows


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def impute_statlog(header, rows, continuous):
    """Replace '?' by the column mean (continuous) or mode (categorical).

    This is how the Statlog 'australian' file was derived from crx.
    """
    out = [list(r) for r in rows]
    for j, name in enumerate(header):
        present = [r[j] for r in rows if r[j] != MISSING]
        if len(present) == len(rows):
            continue
        if name in continuous:
            fill = f"{statistics.fmean(float(v) for v in present):.2f}"
        else:
            fill = Counter(present).most_common(1)[0][0]
        for r in out:
            if r[j] == MISSING:
                r[j] = fill
    return out


def orange_member(tar, name):
    return tar.extractfile(f"Orange-2.7.8/Orange/datasets/{name}").read().decode("utf-8")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sdist = fetch_release_file("Orange", "2.7.8", ".tar.gz", tmp)
        wheel = fetch_release_file("responsibly", "0.1.2", ".whl", tmp)

        with tarfile.open(sdist) as tar:
            header, rows = read_tab(orange_member(tar, "voting.tab"))
            write_csv(args.out / "vote.csv", header, rows)

            header, rows = read_tab(orange_member(tar, "crx.tab"))
            continuous = {"A2", "A3", "A8", "A11", "A14", "A15"}
            write_csv(args.out / "australian.csv", header, impute_statlog(header, rows, continuous))

            header, rows = read_tab(orange_member(tar, "imports-85.tab"))
            write_csv(args.out / "autos.csv", header, rows)

        with zipfile.ZipFile(wheel) as zf:
            names = ADULT_COLUMNS
            rows = []
            for part in ("adult.data", "adult.test"):
                text = zf.read(f"responsibly/dataset/adult/{part}").decode("utf-8")
                for rec in csv.reader(io.StringIO(text), skipinitialspace=True):
                    if len(rec) != len(names):
                        continue
                    rec = [v.strip() for v in rec]
                    rec[-1] = rec[-1].rstrip(".")
                    rows.append(rec)
            # individuals outside the private work class, '?' workclass included
            sub = [r for r in rows if r[names.index("workclass")] != "Private"]
            write_csv(args.out / "adult_nonprivate.csv", names, sub)


if __name__ == "__main__":
    main()
