"""End-to-end check of the Python bindings on a small synthetic lake.

Build and install first:
    pip install maturin
    pip install --no-build-isolation ./crates/python
"""

import json
import sys
import tempfile
from pathlib import Path

import lakescope_py as ls


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        n_tables, n_statements = ls.generate_synthetic_lake(str(tmp / "lake"), seed=3)
        assert (n_tables, n_statements) == (50, 200), (n_tables, n_statements)

        config = json.dumps({"epochs": 10, "classifier_epochs": 50})
        metrics = json.loads(ls.run_benchmark(str(tmp / "lake"), str(tmp / "run"), config))
        print("binary F1", round(metrics["binary"]["f1"], 4))
        print("ranked", [(r["k"], round(r["recall"], 4)) for r in metrics["ranked"]])
        assert metrics["schema_version"] == 1
        assert metrics["timing"]["nondeterministic"] is True

        engine = ls.Engine(str(tmp / "lake"), str(tmp / "run"))
        statement = json.loads((tmp / "lake" / "statements.jsonl").read_text().splitlines()[0])
        ranked = engine.query(statement["text"], mode="ranked", k=5)
        assert len(ranked) == 5
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)
        vec = engine.embed(statement["text"])
        assert abs(sum(x * x for x in vec) - 1.0) < 1e-9
        full = engine.query(statement["text"], k=1000)
        assert len(full) == engine.n_tables()
        binary = engine.query(statement["text"], mode="binary")
        assert all(0.5 < p < 1.0 for _, p in binary)

        try:
            engine.query("   ")
        except ValueError:
            pass
        else:
            raise AssertionError("empty query accepted")

        p, r, f = ls.binary_metrics({"q": ["a", "b", "c", "d"]}, {"q": ["a", "b"]})
        assert (p, r) == (0.5, 1.0) and abs(f - 2 / 3) < 1e-12
        assert ls.ranked_metrics({"q": ["t1", "t9"]}, {"q": ["t1"]}, [2]) == [(2, 0.5, 1.0)]
    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
