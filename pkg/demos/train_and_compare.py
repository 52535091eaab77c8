"""Train the dense network and a factorized variant on the same synthetic
data and compare quality, parameter count, and training time.

Desk-sized so it finishes in a few minutes on one CPU core: 600 images at
48x48, four epochs each. The equivalent CLI flow is `tcnn generate`,
`tcnn train` (once per variant), then `tcnn report`.

Run:  python3 demos/train_and_compare.py
"""

import numpy as np

from tcnn import (
    RankConfig,
    TrainConfig,
    build_model,
    count_params,
    evaluate_scores,
    generate_synthetic,
    predict_scores,
    reference_spec,
    samples_from_records,
    split,
    time_improvement,
    train,
)
from tcnn.data import stack_images

SIZE = 48
records = generate_synthetic(600, 0.3, seed=5, size=SIZE)
dataset = split(samples_from_records(records, SIZE), (0.8, 0.1, 0.1), seed=5)
test_images, test_labels = stack_images(dataset.test)
print(f"splits: {len(dataset.train)} train / {len(dataset.val)} val / "
      f"{len(dataset.test)} test at {SIZE}x{SIZE}")

results = {}
for name, rank_config in [("dense", None), ("tucker(16,16,3,3)", RankConfig(16, 16, 3, 3))]:
    model = build_model(reference_spec(SIZE, rank_config), seed=3)
    report = count_params(model)
    cfg = TrainConfig(epochs=4, batch_size=32, seed=3, data_seed=5)
    best, record = train(model, dataset, cfg)
    scores = predict_scores(best, test_images)
    rep = evaluate_scores(scores, test_labels, threshold=0.2)
    results[name] = (report, record, rep)
    print(f"\n{name}")
    print(f"  stored conv weights {report.n_c_f} (C_r x{report.c_r:.2f})")
    print(f"  wall time {record.total_wall_seconds:.1f}s, "
          f"best epoch {record.best_epoch}")
    print(f"  test precision {rep.precision:.3f} recall {rep.recall:.3f} "
          f"F1 {rep.f1:.3f} AUC {rep.auc:.3f}")

dense_seconds = results["dense"][1].total_wall_seconds
tucker_seconds = results["tucker(16,16,3,3)"][1].total_wall_seconds
print(f"\ntraining time improvement of the factorized model: "
      f"{time_improvement(dense_seconds, tucker_seconds):.0f}%")
