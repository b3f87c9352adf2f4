"""
Train, evaluate, stress-test and probe
======================================

End to end on a deliberately small configuration (about a minute on one
CPU core): train the teacher/student pair, evaluate both, swap in locations
the teacher never saw, and map what the teacher believes about each place
when the image carries no information.

Run with ``python3 demos/03_train_evaluate_probe.py [out_dir] [steps]``.
"""
import sys
from dataclasses import replace
from pathlib import Path

from stssl.evaluation import evaluate, make_probe_grid, ood_metadata_eval, prior_probe, sample_ood_locations
from stssl.experiments import get_preset, load_data
from stssl.plotting import plot_probe, plot_pseudo_curves, write_pseudo_csv
from stssl.train import run_training

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1000

# Start from the desk-scale preset and cut the dataset and schedule down
cfg = get_preset("synthetic-default")
world = replace(cfg.dataset.synthetic, samples_total=3000)
cfg = cfg.override("dataset", synthetic=world, test_samples=500)
cfg = cfg.override("train", total_steps=steps, log_interval=25)
print("config", cfg.name, "hash", cfg.hash)

data = load_data(cfg)
print(f"{len(data.labeled_ids)} labeled / {len(data.unlabeled_ids)} unlabeled training images")

result = run_training(cfg.train_config(), data.train, data.labeled_ids, data.unlabeled_ids,
                      out / "run", config_hash=cfg.hash)
print(f"trained {result.state.step} steps in {result.seconds:.0f}s")

# pseudo-label quality/quantity over training (teacher labels for the student)
csv_path = write_pseudo_csv(result.metrics, out / "run" / "pseudo.csv", cfg.hash)
plot_pseudo_curves([csv_path], out / "pseudo_labels.png", ["st-ssl"])

# the EMA weights are what gets evaluated
teacher, student = result.state.ema_model("teacher"), result.state.ema_model("student")
print("teacher accuracy", round(evaluate(teacher, data.test).score, 3))
print("student accuracy", round(evaluate(student, data.test).score, 3))

# Out-of-distribution metadata: the teacher should suffer, the student cannot notice
locs = sample_ood_locations(data.lat_range, data.lon_range, n=3, seed=cfg.train.seed)
ood = ood_metadata_eval(teacher, student, data.test, locs)
for row in ood.rows():
    std = "" if row["std"] is None else f" +- {row['std']:.3f}"
    print(f"  {row['model']:8s} ood={row['ood_component']:9s} {row['score']:.3f}{std}")

# Prior probe: a flat grey image at every grid point shows the learned map
grid = make_probe_grid(data.lat_range, data.lon_range, n_lat=32, n_lon=32, n_days=12)
probe = prior_probe(teacher, grid, model_id=cfg.hash)
probe_csv = probe.to_csv(out / "probe.csv", config_hash=cfg.hash)
print("wrote", plot_probe(probe_csv, out / "probe-class0.png", class_index=0))
