"""Factorize an already-trained dense model and watch fidelity degrade as
the rank bounds shrink.

Trains the dense network briefly, then replaces every conv kernel by its
truncated higher-order SVD at several rank bounds, comparing logits and test
metrics against the original at each step. Full ranks reproduce the dense
model exactly (up to float32 rounding); small ranks trade fidelity for
compression.

Run:  python3 demos/factorize_pretrained.py
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
    tensorize_pretrained,
    train,
)
from tcnn.data import stack_images

SIZE = 48
records = generate_synthetic(500, 0.3, seed=9, size=SIZE)
dataset = split(samples_from_records(records, SIZE), (0.8, 0.1, 0.1), seed=9)
test_images, test_labels = stack_images(dataset.test)

dense = build_model(reference_spec(SIZE), seed=1)
dense, _ = train(dense, dataset, TrainConfig(epochs=3, batch_size=32, seed=1,
                                             data_seed=9))
dense_scores = predict_scores(dense, test_images)
dense_rep = evaluate_scores(dense_scores, test_labels, 0.2)
dense_logits = dense.forward(test_images[:64])
print(f"trained dense model: test F1 {dense_rep.f1:.3f}")

print(f"\n{'ranks':>15} {'C_r':>7} {'logit rel err':>14} {'argmax match':>13} {'F1':>6}")
for ranks in [(128, 128, 3, 3), (32, 32, 3, 3), (8, 8, 3, 3), (2, 2, 2, 2)]:
    tucker = tensorize_pretrained(dense, RankConfig(*ranks))
    logits = tucker.forward(test_images[:64])
    rel = np.linalg.norm(logits - dense_logits) / np.linalg.norm(dense_logits)
    match = float((logits.argmax(1) == dense_logits.argmax(1)).mean())
    rep = evaluate_scores(predict_scores(tucker, test_images), test_labels, 0.2)
    print(f"{str(ranks):>15} x{count_params(tucker).c_r:>5.2f} {rel:>14.2e} "
          f"{match:>12.0%} {rep.f1:>6.3f}")
