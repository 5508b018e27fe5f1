"""End-to-end forecast on the default synthetic city, against the baseline.

Generates the default 18-day stream (24 stations, 3 communities, weekday
commute peaks, quiet weekends), trains the full model for up to 30 epochs,
and compares test MAE with the time-of-day historical average. The weekly
rhythm is what separates the two: a slot average blends weekdays with
weekends, while the continuously updated memories read the live regime.

Runtime is a few minutes; this is the same configuration the acceptance
suite gates on (tests/test_acceptance.py, criterion 7).
"""

import math

import numpy as np

from odcast.events import od_matrix_series
from odcast.evaluation import compute_metrics, evaluate, ha_baseline
from odcast.model import HyperParams
from odcast.synthesis import SynthConfig, generate
from odcast.training import Splits, TrainConfig, train

cfg = SynthConfig()
events, catalog, rate = generate(cfg)
tau = 1800.0
splits = Splits.from_days(14, 2, 2, tau)
print(f"{len(events)} events over {cfg.days:.0f} days, {cfg.n} stations "
      f"(test days are a weekend)")

truths = od_matrix_series(events, 0.0, tau, splits.total, cfg.n)
ha = ha_baseline([(k * tau, truths[k]) for k in range(splits.train_windows)], tau)
test_idx = range(splits.train_windows + splits.val_windows, splits.total)
ha_mae = compute_metrics([ha.predict(k * tau) for k in test_idx],
                         [truths[k] for k in test_idx]).mae
print(f"historical average test MAE: {ha_mae:.4f}")

hyper = HyperParams(n=cfg.n, dim=32, msg_dim=32, heads=4, tau=tau,
                    decay_rate=math.log(2.0) / 7200.0)
tc = TrainConfig(max_epochs=30, splits=splits, patience=30, lr=1e-4, seed=0, t0=0.0)
result = train(events, catalog, hyper, tc,
               on_epoch=lambda s: print(f"  epoch {s.epoch:2d}: "
                                        f"train_loss={s.train_loss:.4f} "
                                        f"val_mae={s.val_mae:.4f}"))
print(f"best epoch by validation MAE: {result.best_epoch}")

outcome = evaluate(result.params, events, catalog, hyper, splits, t0=0.0)
print(f"\nmodel test MAE: {outcome.all_pairs.mae:.4f} "
      f"(HA {ha_mae:.4f}, margin {(1 - outcome.all_pairs.mae / ha_mae) * 100:.1f}%)")
report = outcome.above_average
print(f"above-average-demand cells: MAE {report.mae:.4f}, RMSE {report.rmse:.4f}, "
      f"PCC {report.pcc if report.pcc is not None else 'undefined'}")

busiest = max(outcome.predictions, key=lambda p: p.actual.sum())
print(f"\nbusiest test window starts at t={busiest.window_start:.0f}s:")
print("truth row sums:     ", np.array2string(busiest.actual.sum(axis=1), precision=1))
print("prediction row sums:", np.array2string(busiest.predicted.sum(axis=1),
                                              precision=1))
