import math

import numpy as np
import pytest

from evrpm.events import OFF, ON, BoundingBoxObservation, EventStream, SensorGeometry, parse_event_binary, parse_event_csv, write_event_binary, write_event_csv
from evrpm.synth import (
    MotionProfile,
    PropellerSpec,
    RpmProfile,
    add_noise_events,
    motion_path,
    off_on_gaps,
    oracle_period_us,
    oracle_rpm,
    simulate_propeller_events,
    simulate_track,
    surge_profile,
)

G = SensorGeometry()


def prop(rpm, blades=2, center=(640.3, 360.2), length=6, **kw):
    return PropellerSpec(center, length, blades, RpmProfile.constant(rpm) if np.isscalar(rpm) else rpm, **kw)


def gaps_by_pixel(stream):
    last, out = {}, {}
    for e in stream:
        if e.polarity == OFF:
            last[(e.x, e.y)] = e.t
        elif (e.x, e.y) in last:
            out.setdefault((e.x, e.y), []).append((e.t, e.t - last[(e.x, e.y)]))
    return out


# ---------------------------------------------------------------- profiles


def test_profile_angle_inverse():
    p = RpmProfile([(0.0, 3000.0), (0.5, 9000.0), (0.5, 12000.0), (1.0, 6000.0)])
    t = np.linspace(0, 2, 101)
    np.testing.assert_allclose(p.inverse_angle(p.angle(t)), t, atol=1e-12)
    assert p.rpm_at(0.25) == pytest.approx(6000)
    assert p.rpm_at(0.5) == 12000  # repeated knot is a step
    assert p.rpm_at(5.0) == 6000


def test_profile_rejects_nonpositive():
    with pytest.raises(ValueError):
        RpmProfile([(0.0, 100.0), (1.0, 0.0)])


def test_surge_profile_shape():
    p = surge_profile([(1.0, 0.5)], 6000, 18000, 0.05)
    assert p.rpm_at(0.5) == 6000 and p.rpm_at(1.2) == 18000 and p.rpm_at(1.6) == 6000
    assert p.rpm_at(1.025) == pytest.approx(12000)


# ---------------------------------------------------------------- propeller events


def test_6000rpm_two_blades_gaps_5ms():
    s = simulate_propeller_events(prop(6000), 0.3, G)
    gaps = off_on_gaps(s)
    assert len(gaps) > 100
    assert all(abs(g - 5000) <= 1 for g in gaps)


def test_one_blade_2344_rpm_period_edge():
    s = simulate_propeller_events(prop(2344, blades=1), 0.3, G)
    gaps = off_on_gaps(s)
    assert all(abs(g - 60e6 / 2344) <= 1 for g in gaps)
    assert 25_500 < np.median(gaps) < 25_700


def test_step_profile_gaps_halve():
    s = simulate_propeller_events(prop(RpmProfile.step(0.2, 6000, 12000)), 0.4, G)
    for seq in gaps_by_pixel(s).values():
        before = [g for t, g in seq if t < 200_000]
        after = [g for t, g in seq if t > 210_000]
        assert all(abs(g - 5000) <= 1 for g in before)
        assert all(abs(g - 2500) <= 1 for g in after)


def test_blade_width_on_before_off():
    spec = prop(6000, blade_width_rad=0.3)
    s = simulate_propeller_events(spec, 0.1, G)
    dwell = 0.3 / (2 * math.pi * 100) * 1e6
    last_on = {}
    for e in s:
        if e.polarity == ON:
            last_on[(e.x, e.y)] = e.t
        else:
            assert abs(e.t - last_on[(e.x, e.y)] - dwell) <= 1


def test_jitter_keeps_order_and_bounds():
    s = simulate_propeller_events(prop(9000), 0.2, G, jitter_us=20, seed=4)
    assert np.all(np.diff(s.t) >= 0)
    clean = simulate_propeller_events(prop(9000), 0.2, G)
    T = 60e6 / (9000 * 2)
    assert all(abs(g - T) <= 41 for g in off_on_gaps(s))
    assert len(s) == len(clean)
    again = simulate_propeller_events(prop(9000), 0.2, G, jitter_us=20, seed=4)
    assert s == again


def test_generated_streams_reparse():
    s = simulate_propeller_events(prop(7000), 0.1, G, jitter_us=5, seed=1)
    assert parse_event_csv(write_event_csv(s)) == s
    assert parse_event_binary(write_event_binary(s)) == s


def test_center_path_translates_whole_pixels():
    spec = prop(6000)
    path = lambda t: (640.3 + 100 * t, 360.2 + 0 * t)
    s = simulate_propeller_events(spec, 0.5, G, center_path=path)
    late = s.time_slice(400_000, 500_000)
    assert late.x.min() >= 640 + 40 - 7 and late.x.max() <= 640 + 50 + 7


# ---------------------------------------------------------------- noise


def test_noise_rate_zero_identity_and_determinism():
    s = simulate_propeller_events(prop(6000), 0.1, G)
    assert add_noise_events(s, 0, 1) is s
    a = add_noise_events(s, 50, 7)
    b = add_noise_events(s, 50, 7)
    assert a == b and len(a) > len(s)
    assert np.all(np.diff(a.t) >= 0)
    with pytest.raises(ValueError):
        add_noise_events(s, -1, 0)


def test_noise_region_respected():
    s = simulate_propeller_events(prop(6000), 0.1, G)
    box = BoundingBoxObservation(0, 0, 600, 320, 80, 80)
    n = add_noise_events(s, 2000, 3, region=box)
    assert n.x.min() >= 600 and n.x.max() <= 680 and n.y.min() >= 320 and n.y.max() <= 400
    expected = 2000 * 81 * 81 / 1000 * (int(s.t[-1]) + 1 - int(s.t[0])) / 1e6
    assert len(n) - len(s) == round(expected)


# ---------------------------------------------------------------- oracle


@pytest.mark.parametrize("blades", [1, 2, 3])
def test_generator_self_consistency_sweep(blades):
    for rpm in range(3000, 30001, 1500):
        T = 60e6 / (rpm * blades)
        if T >= 25_600:
            continue
        s = simulate_propeller_events(prop(rpm, blades), max(0.15, 6 * T / 1e6), G)
        assert abs(oracle_period_us(s) - T) <= 6, (rpm, blades)


def test_oracle_clean_6000():
    s = simulate_propeller_events(prop(6000), 0.3, G)
    assert oracle_rpm(s, 2) == pytest.approx(6000, rel=0.01)


def test_oracle_noise_20_percent():
    s = simulate_propeller_events(prop(6000), 0.3, G)
    box = BoundingBoxObservation(0, 0, 630, 350, 20, 20)
    span = (int(s.t[-1]) - int(s.t[0])) / 1e6
    rate = 0.2 * len(s) / (21 * 21 / 1000) / span
    noisy = add_noise_events(s, rate, 11, region=box)
    assert (len(noisy) - len(s)) / len(s) == pytest.approx(0.2, rel=0.01)
    assert oracle_rpm(noisy, 2) == pytest.approx(6000, rel=0.02)


def test_oracle_mixture_three_to_one(rng):
    a = simulate_propeller_events(prop(6000, center=(400.3, 300.2)), 0.3, G)
    b = simulate_propeller_events(prop(9000, center=(800.3, 300.2)), 0.3, G)
    pix = np.unique(b.y.astype(np.int64) * G.width + b.x)
    per_pix = len(b) / len(pix)
    keep_pix = rng.choice(pix, int(round(len(a) / 3 / per_pix)), replace=False)
    sub = b.records[np.isin(b.y.astype(np.int64) * G.width + b.x, keep_pix)]
    ratio = len(a) / len(sub)
    assert 2.5 < ratio < 3.5
    rec = np.concatenate([a.records, sub])
    rec = rec[np.argsort(rec["t"], kind="stable")]
    mixed = EventStream(G, rec)
    assert oracle_rpm(mixed, 2) == pytest.approx(6000, rel=0.01)


def test_oracle_needs_ten_gaps():
    s = simulate_propeller_events(prop(6000, length=2, hub_radius=1.9), 0.006, G)
    with pytest.raises(ValueError):
        oracle_rpm(s, 2)


# ---------------------------------------------------------------- tracks


def test_constant_velocity_track():
    ann, gt = simulate_track(MotionProfile(start=(100, 360), velocity=(30, 0)), 2.0, 30)
    assert len(ann) == 60
    c = np.array([b.center for b in ann])
    np.testing.assert_allclose(c[:, 1], 360)
    np.testing.assert_allclose(np.diff(c[:, 0]) / (np.diff([b.t for b in ann]) / 1e6), 30, rtol=1e-9)
    np.testing.assert_allclose(gt.xy, c)


def test_circular_periodicity():
    path = motion_path(MotionProfile("circular", start=(640, 360), radius=100, freq_hz=0.25), 5)
    x, y = path(np.array([0.0, 4.0]))
    assert abs(x[1] - x[0]) < 1e-6 and abs(y[1] - y[0]) < 1e-6
    x2, y2 = path(2.0)
    assert float(x2) == pytest.approx(440)


def test_sinusoidal_path():
    path = motion_path(MotionProfile("sinusoidal", start=(640, 360), amplitude=(50, 10), freq_hz=1.0), 2)
    x, y = path(0.25)
    assert float(x) == pytest.approx(690) and float(y) == pytest.approx(370)


def test_random_accel_reproducible():
    prof = MotionProfile("random_accel", accel_std=40, seed=3, burst_rate_hz=2.0, burst_accel=200)
    a = simulate_track(prof, 3.0, 30)
    b = simulate_track(prof, 3.0, 30)
    np.testing.assert_array_equal(a.ground_truth.xy, b.ground_truth.xy)
    assert a.path.bursts == b.path.bursts and a.path.bursts


def test_random_accel_mean_speed_matches_theory():
    sigma, hold, t = 50.0, 0.1, 2.0
    speeds = []
    for seed in range(100):
        path = motion_path(MotionProfile("random_accel", accel_std=sigma, accel_hold_s=hold, seed=seed), t)
        grid, vel = path.velocity_grid
        i = int(np.argmin(np.abs(grid - t)))
        speeds.append(np.hypot(*vel[i]))
    expected = math.sqrt(math.pi / 2) * sigma * math.sqrt(hold * t)
    # Rayleigh sd / sqrt(100) is ~4% of the mean; allow ~4 standard errors
    assert np.mean(speeds) == pytest.approx(expected, rel=0.15)


def test_track_clamping_reported():
    tr = simulate_track(MotionProfile(start=(1250, 360), velocity=(100, 0)), 1.0, 30, box_size=(80, 60))
    assert tr.clamped > 0
    assert all(b.x_max <= G.width for b in tr.annotations)


def test_fps_must_be_positive():
    with pytest.raises(ValueError):
        simulate_track(MotionProfile(), 1.0, 0)
