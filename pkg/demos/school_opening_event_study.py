"""Event study and group-time effects on a panel with a known opening step.

Units open at staggered dates and the outcome jumps by one on opening day,
so every post-opening coefficient should be one and every lead zero.  On the
weekly scale the opening week is only partly treated, so its effect is a fraction.
"""
from dynpanel import (
    EventStudySpec,
    aggregate_dynamic,
    csdid_att,
    event_study_fit,
    simultaneous_bands,
)
from dynpanel.did import generate_step_panel

ds = generate_step_panel(n_units=80, n_days=140, effect=1.0, noise=0.5, seed=3)

es = event_study_fit(ds, EventStudySpec("y", lead=3, lag=4))
print(es.to_frame().round(3).to_string(index=False))

res = csdid_att(ds, "y", period="week", on_missing="skip")
dyn = aggregate_dynamic(res)
bands = simultaneous_bands(dyn, 0.95, B=1000, seed=0)
print(f"\nsup-t critical value {bands.crit:.2f}")
for k, d in enumerate(dyn):
    print(f"e={d.event_time:+d}  att {d.att:6.3f}  band [{bands.lo[k]:6.3f}, {bands.hi[k]:6.3f}]")
