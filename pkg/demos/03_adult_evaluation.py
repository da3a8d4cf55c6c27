"""Private synthesis of the UCI ADULT census table, scored against the real data.

Needs adult.data and adult.test in ~/.cache/dpautogan/adult (or $ADULT_DIR).
The full eps=0.51 preset trains in about 12 minutes on one core and the
evaluation takes longer still; pass --quick to train for a tenth of the
iterations (spending less privacy, at lower quality).

    python3 demos/03_adult_evaluation.py [--quick] [outdir]
"""

import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

from dpautogan.data import split, write_csv
from dpautogan.datasets import load_adult
from dpautogan.metrics import evaluate, label_prediction_accuracy
from dpautogan.presets import preset
from dpautogan.trainer import generate, train

args = [a for a in sys.argv[1:] if a != "--quick"]
quick = "--quick" in sys.argv
out = Path(args[0] if args else "adult_run")
out.mkdir(exist_ok=True)

# %% The canonical 32561/16281 split.
table = load_adult()
R, T = split(table, 2 / 3, preserve_order=True)
print(f"train {R.n_rows} rows, test {T.n_rows} rows, encoded width {R.schema.width}")

# Reference point: a random forest trained on real data.
base = label_prediction_accuracy(R, T, "salary")
print(f"real-data salary accuracy: {base['accuracy']:.4f}")

# %% Train the eps=0.51 preset.
plan = preset("adult-eps-0.51", n_train=R.n_rows)
if quick:
    ae, gan = plan.autoencoder, plan.gan
    plan = dataclasses.replace(
        plan,
        autoencoder=dataclasses.replace(ae, dp=dataclasses.replace(ae.dp, iterations=ae.dp.iterations // 10)),
        gan=dataclasses.replace(gan, generator_steps=gan.generator_steps // 10,
                                discriminator_dp=dataclasses.replace(
                                    gan.discriminator_dp,
                                    iterations=gan.discriminator_dp.iterations // 10)))
t0 = time.time()


def show(event):
    if event["iter"] % 1000 == 0:
        print(" ", json.dumps(event))


model, spend = train(R, plan, log_fn=show)
print(f"trained in {time.time() - t0:.0f}s: {spend}")

# %% Sample as many rows as the training set and evaluate.
S = generate(model, R.n_rows, seed=plan.seeds["synth"])
write_csv(S, out / "synth.csv")
report, tables = evaluate(R, T, S, label_column="salary", kway_repeats=20)
(out / "report.json").write_text(json.dumps(report, indent=2))
print(f"synthetic-data salary accuracy: {report['global']['label_prediction']['synthetic']['accuracy']:.4f}")
print(f"3-way marginal TV (mean): {report['global']['kway_tv']['mean']:.3f}")
for row in report["global"]["diversity"]:
    print(f"  {row['name']:>15}: JSD {row['jsd']:.3f}, smoothed KL {row['mu_smoothed_kl']:.3f}")

# %% Plot-ready tables, one CSV per figure type.
for name, (header, rows) in tables.items():
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
print("plot tables:", ", ".join(sorted(tables)), "->", out)
