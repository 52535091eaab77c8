"""Parameter budgets of the reference architecture across rank bounds.

Builds the dense reference network and its factorized variants for the five
standard rank configurations, then prints conv-weight counts, total counts,
and compression ratios, with the closed-form count cross-checked against the
actual parameter buffers.

Run:  python3 demos/parameter_budget.py
"""

from tcnn import RankConfig, build_model, count_params, reference_spec

dense = build_model(reference_spec(64), seed=0)
dense_report = count_params(dense)
print("dense reference model")
print(f"  conv weights {dense_report.n_c}, biases {dense_report.n_b}, "
      f"head {dense_report.n_r}, total {dense_report.n_cnn}")

print(f"\n{'ranks':>15} {'conv stored':>12} {'total':>9} {'C_r':>7}")
print(f"{'dense':>15} {dense_report.n_c_f:>12} {dense_report.n_cnn:>9} {'x1.00':>7}")
for ranks in [(96, 96, 3, 3), (64, 64, 3, 3), (32, 32, 3, 3),
              (16, 16, 3, 3), (8, 8, 3, 3)]:
    model = build_model(reference_spec(64, RankConfig(*ranks)), seed=0)
    report = count_params(model)
    print(f"{str(ranks):>15} {report.n_c_f:>12} {report.n_tcnn:>9} "
          f"{'x%.2f' % report.c_r:>7}")

print("\nper-layer view at ranks (32, 32, 3, 3):")
model = build_model(reference_spec(64, RankConfig(32, 32, 3, 3)), seed=0)
for layer in count_params(model).per_layer:
    print(f"  layer {layer.index}: dims {layer.dims} ranks {layer.ranks} "
          f"dense {layer.n_dense:>6} stored {layer.n_stored:>6} "
          f"ratio x{layer.ratio:.2f}")
