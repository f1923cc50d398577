"""Acceptance suite: one printed PASS/FAIL line per criterion.

The desk-scale runs (criteria 6 to 8) train with the default configuration
and take a few minutes in total.
"""

import dataclasses
import json
import socket
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import background_ref, fd_check, fuse_ref, iou_ref, normalize_ref, repaint_ref, union_ref
from taskobs import cli, codecs, evalharness, kernels, policy, simworld, wire
from taskobs.errors import MalformedResponseError, ProviderTimeoutError
from taskobs.obs_core import (
    EntityPalette,
    TaskSpec,
    Variant,
    background_mask,
    build_observation,
    fuse_l1,
    mask_iou,
    mask_union,
    normalize_depth_in_mask,
    repaint_l0,
)
from taskobs.providers import PerceptionRequest, episode_paths, file_provide, remote_provide, write_perception
from taskobs.seeding import derive_seed


def _ulps(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.max(np.abs(a - b) / np.spacing(np.maximum(np.abs(a), np.abs(b))), initial=0.0)


# ---------------------------------------------------------------- 1


def test_criterion_1_pixel_oracles(criterion):
    rng = np.random.default_rng(derive_seed("acceptance", 1))
    palette = EntityPalette(background=(7, 8, 9), robot=(200, 10, 30), object=(20, 240, 60))
    kappa, c_r, c_o = palette.background, palette.robot, palette.object
    mismatches = []
    worst_ulp = 0.0
    start = time.perf_counter()
    for k in range(200):
        h, w = rng.integers(1, 17, size=2)
        p = rng.uniform(0.05, 0.95)
        robot, obj = rng.random((h, w)) < p, rng.random((h, w)) < p
        extra = rng.random((h, w)) < p
        # quantized depths create ties at the min and max
        depth = rng.integers(0, 50, size=(h, w)) * rng.uniform(0.01, 0.2) + rng.uniform(0, 3)
        eps = float(10.0 ** rng.uniform(-9, -1))
        R, O, D = robot.tolist(), obj.tolist(), depth.tolist()

        if mask_union([robot, obj, extra]).astype(int).tolist() != union_ref([R, O, extra.tolist()]):
            mismatches.append((k, "mask_union"))
        if background_mask(robot, obj).astype(int).tolist() != background_ref(R, O):
            mismatches.append((k, "background_mask"))
        l0 = repaint_l0(robot, obj, palette)
        if [[tuple(px) for px in row] for row in l0.tolist()] != repaint_ref(R, O, kappa, c_r, c_o):
            mismatches.append((k, "repaint_l0"))
        if obj.any():
            dn = normalize_depth_in_mask(depth, obj, eps)
            ref = normalize_ref(D, O, eps)
            u = _ulps(dn, ref)
            worst_ulp = max(worst_ulp, u)
            if u > 1:
                mismatches.append((k, "normalize_depth_in_mask"))
            # fuse against the oracle's own normalization so the two paths share nothing
            fused = fuse_l1(l0, obj, np.array(ref))
            if [[tuple(px) for px in row] for row in fused.tolist()] != fuse_ref(l0.tolist(), O, ref):
                mismatches.append((k, "fuse_l1"))
        if mask_iou(robot, obj) != iou_ref(R, O) or mask_iou(obj, obj) != 1.0:
            mismatches.append((k, "mask_iou"))
        # the fallback backend must agree with the compiled one bit for bit
        for name, be in kernels.backends().items():
            if not np.array_equal(be.repaint(robot, obj, palette.as_array()), l0):
                mismatches.append((k, f"{name}.repaint"))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 5.0
    criterion(1, ok, f"200 instances x 6 ops, {len(mismatches)} mismatches, worst depth error {worst_ulp:.2f} ulp, "
                     f"{elapsed:.2f}s (limit 5s); backends {list(kernels.backends())}")
    assert ok, mismatches[:10]


# ---------------------------------------------------------------- 2


def test_criterion_2_depth_closed_form(criterion):
    depth = np.array([[2.0, 4.0, 6.0, 99.0]])
    obj = np.array([[True, True, True, False]])
    got = normalize_depth_in_mask(depth, obj, 1e-6)[0]
    expected = [0.0, 2 / (4 + 1e-6), 4 / (4 + 1e-6), 0.0]
    rel = max(abs(g - e) / abs(e) if e else abs(g) for g, e in zip(got, expected))
    ok = rel <= 1e-12
    criterion(2, ok, f"{{2,4,6}} eps=1e-6 -> {got[:3].tolist()}, max rel error {rel:.1e} (limit 1e-12)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_canonical_invariance(criterion):
    spec = TaskSpec()
    canon_breaks, org_min = [], 1.0
    pairs = 0
    for i in range(50):
        base = simworld.sample_scene("ID", derive_seed("acceptance", 3, i), noise=0)
        gt = simworld.ground_truth(base)
        frame = simworld.render(base)
        ref = {v: build_observation(frame, gt.robot, gt.object, gt.depth, spec, v)
               for v in (Variant.ORG, Variant.L0, Variant.L1)}
        for cond in simworld.OOD_CONDITIONS:
            other = dataclasses.replace(base, appearance=simworld.THEMES[cond].with_noise(0))
            gt2 = simworld.ground_truth(other)
            frame2 = simworld.render(other)
            pairs += 1
            for v in (Variant.L0, Variant.L1):
                if build_observation(frame2, gt2.robot, gt2.object, gt2.depth, spec, v) != ref[v]:
                    canon_breaks.append((i, cond, v.value))
            org = build_observation(frame2, None, None, None, spec, Variant.ORG)
            org_min = min(org_min, float((org.data != ref[Variant.ORG].data).any(axis=-1).mean()))
    ok = not canon_breaks and org_min >= 0.01
    criterion(3, ok, f"{pairs} theme pairs: L0/L1 identical in {pairs - len({b[:2] for b in canon_breaks})}; "
                     f"ORG min differing-pixel fraction {100 * org_min:.2f}% (need >= 1%)")
    assert ok, canon_breaks[:5]


# ---------------------------------------------------------------- 4


def test_criterion_4_gradients(criterion):
    rng = np.random.default_rng(derive_seed("acceptance", 4))
    start = time.perf_counter()
    total, failures = 0, []
    for variant, whitened in (("L1", False), ("S2", True)):
        pol = policy.FlowPolicy.init(variant, obs_history=2, seed=11)
        params = pol.params
        for k in params:
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        c = 2 if variant == "S2" else 3
        pooled = rng.random((8, 2, policy.GRID, policy.GRID, c))
        a, x0, s = rng.normal(size=(8, 3)), rng.standard_normal((8, 3)), rng.random(8)
        whiten = policy.input_whitening(pooled, params) if whitened else None
        loss_fn = lambda p: policy.loss_and_grads(p, pooled, a, x0, s, with_grads=False, whiten=whiten)[0]
        _, grads = policy.loss_and_grads(params, pooled, a, x0, s, whiten=whiten)
        n, bad = fd_check(loss_fn, params, grads, rng, per_tensor=20, rtol=1e-4, atol=1e-6)
        total += n
        failures += bad
    elapsed = time.perf_counter() - start
    ok = total >= 200 and not failures and elapsed < 30
    criterion(4, ok, f"{total} sampled parameters over encoder, field and adapter; {len(failures)} outside "
                     f"rtol 1e-4/atol 1e-6; {elapsed:.1f}s (limit 30s)")
    assert ok, failures[:5]


# ---------------------------------------------------------------- 5


def test_criterion_5_flow_sampling(criterion):
    x0 = np.array([0.7, -1.3, 2.1])
    c = np.array([0.5, -0.25, 1.5])
    ns = (1, 2, 3, 7, 10, 64, 100)
    const_exact = all(np.array_equal(policy.euler_integrate(lambda x, s: c, x0, n), x0 + c) for n in ns)
    lin_err = 0.0
    for n in (1, 10, 100):
        got = policy.euler_integrate(lambda x, s: -x, x0, n)
        lin_err = max(lin_err, float(np.max(np.abs(got - (1 - 1 / n) ** n * x0))))
    ok = const_exact and lin_err <= 1e-9
    criterion(5, ok, f"constant field bit-exact for N in {ns}: {const_exact}; "
                     f"linear field max error {lin_err:.1e} for N in {{1,10,100}} (limit 1e-9)")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_robustness_gap(criterion, tmp_path):
    cfg = evalharness.ExperimentConfig(name="robustness")
    start = time.perf_counter()
    table = evalharness.run_experiment(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    print("\n" + evalharness.emit_report(table, "text"))
    id_rate = {v: table.rate(v, "ID") for v in cfg.variants}
    bg = {v: table.ood_mean(v, "OOD_BG") for v in cfg.variants}
    checks = {
        "ID>=80 all": all(r >= 80 for r in id_rate.values()),
        "ORG bg<=50% ID": bg["ORG"] <= 0.5 * id_rate["ORG"],
        "L0 bg>=85% ID": bg["L0"] >= 0.85 * id_rate["L0"],
        "L1 bg>=85% ID": bg["L1"] >= 0.85 * id_rate["L1"],
        "gap>=30": bg["L0"] - bg["ORG"] >= 30,
        "<=15min": elapsed <= 900,
    }
    ok = all(checks.values())
    detail = (f"ID {', '.join(f'{v} {r:.1f}' for v, r in id_rate.items())}; "
              f"OOD_BG mean {', '.join(f'{v} {r:.1f}' for v, r in bg.items())}; "
              f"gap {bg['L0'] - bg['ORG']:.1f}; {elapsed / 60:.1f} min; "
              f"failed checks: {[k for k, v in checks.items() if not v] or 'none'}")
    criterion(6, ok, detail)
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_robot_mask_ablation(criterion):
    cfg = evalharness.ExperimentConfig(name="ablation", variants=("L0",), conditions=("ID",))
    table = evalharness.robot_mask_ablation(cfg)
    only, both = table.rate("Target-only", "ID"), table.rate("Target+Robot", "ID")
    ok = only <= 0.5 * both
    criterion(7, ok, f"ID success Target-only {only:.1f} vs Target+Robot {both:.1f} (need <= half); "
                     f"same seeds {cfg.seeds}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_s2_parity(criterion):
    cfg = evalharness.ExperimentConfig(name="s2", variants=("L1", "S2"), conditions=("ID", "OOD_BG_1"),
                                       seeds=(0,))
    table = evalharness.run_experiment(cfg)
    shapes = {v: policy.param_shapes(Variant.parse(v), cfg.train.obs_history) for v in ("ORG", "L0", "L1", "S2")}
    counts = {v: sum(int(np.prod(s)) for s in sh.values()) for v, sh in shapes.items()}
    shared = {k: s for k, s in shapes["S2"].items() if not k.startswith("adapter")}
    parity = (counts["ORG"] == counts["L0"] == counts["L1"] and shared == shapes["L1"]
              and counts["S2"] - counts["L1"] == 9)
    ran = all(not r.failed and r.per_seed for r in table.rows) and table.settings() == ["L1", "S2"]
    ok = parity and ran
    rates = ", ".join(f"{v} ID {table.rate(v, 'ID'):.1f}/BG1 {table.rate(v, 'OOD_BG_1'):.1f}" for v in ("L1", "S2"))
    criterion(8, ok, f"params ORG/L0/L1 {counts['L1']}, S2 {counts['S2']} (+9 adapter); pipeline ran: {ran}; {rates}")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_wire_conformance(criterion, tmp_path):
    frames = []
    for t in range(20):
        scene = simworld.sample_scene("OOD_BG_3" if t % 2 else "ID", derive_seed("acceptance", 9, t))
        frame = simworld.render(scene)
        codecs.write_image(episode_paths(tmp_path, t)["frame"], frame)
        write_perception(tmp_path, t, simworld.ground_truth(scene))
        frames.append(frame)
    server = wire.EchoServer(tmp_path)
    server.start_background()
    slow = wire.EchoServer(tmp_path, delay=0.5)
    slow.start_background()
    mismatches, exchanges = [], 0
    try:
        for t, frame in enumerate(frames):
            for want_depth in (True, False):
                req = PerceptionRequest(t, frame, want_depth=want_depth)
                remote, local = remote_provide(req, server.endpoint), file_provide(req, tmp_path)
                exchanges += 1
                same = (wire.pack_bitmap(remote.robot) == wire.pack_bitmap(local.robot)
                        and wire.pack_bitmap(remote.object) == wire.pack_bitmap(local.object)
                        and (remote.depth is None) == (local.depth is None) == (not want_depth)
                        and (remote.depth is None or remote.depth.tobytes() == local.depth.tobytes()))
                if not same:
                    mismatches.append((t, want_depth))
        host, port = server.endpoint.split(":")
        with socket.create_connection((host, int(port)), timeout=5) as s:
            wire.send_message(s, b"JUNK" + bytes(16))
            _, _, _, status = struct.unpack(">4sBQB", wire.recv_message(s))
        malformed_status = status == wire.STATUS_MALFORMED
        try:
            wire.decode_response(b"COBS\x01" + bytes(3), 64, 64)
            malformed_client = False
        except MalformedResponseError:
            malformed_client = True
        try:
            remote_provide(PerceptionRequest(0, frames[0]), slow.endpoint, timeout=0.1)
            timed_out = False
        except ProviderTimeoutError:
            timed_out = True
    finally:
        for srv in (server, slow):
            srv.shutdown()
            srv.server_close()
    ok = not mismatches and malformed_status and malformed_client and timed_out
    criterion(9, ok, f"{exchanges} exchanges over 20 frames (with and without depth), {len(mismatches)} mismatches; "
                     f"bad magic -> status {status}; truncated reply -> MalformedResponseError={malformed_client}; "
                     f"timeout -> ProviderTimeoutError={timed_out}")
    assert ok


# ---------------------------------------------------------------- 10


def _tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(criterion, tmp_path):
    (tmp_path / "train.json").write_text(json.dumps({"steps": 300, "batch": 32, "seed": 7}))
    runs = {}
    for run, jobs in (("a", "1"), ("b", "2")):
        wd = ["--workdir", str(tmp_path)]
        assert cli.main([*wd, "gen-demos", "--episodes", "3", "--seed", "4", "--out", f"demos_{run}"]) == 0
        assert cli.main([*wd, "train", "--demos", f"demos_{run}", "--variant", "L1", "--config", "train.json",
                         "--out", f"ckpt_{run}/l1.fmp"]) == 0
        assert cli.main([*wd, "eval", "--checkpoint", f"ckpt_{run}/l1.fmp", "--conditions", "ID,OOD_BG_2",
                         "--rollouts", "3", "--seeds", "0,1", "--max-steps", "30", "--flip-rate", "0.01",
                         "--out", f"res_{run}", "--jobs", jobs]) == 0
        runs[run] = (_tree(tmp_path / f"demos_{run}"), _tree(tmp_path / f"ckpt_{run}"),
                     (tmp_path / f"res_{run}" / "raw.jsonl").read_bytes())
    same = [x == y for x, y in zip(runs["a"], runs["b"])]
    ok = all(same)
    criterion(10, ok, f"episodes identical={same[0]} ({len(runs['a'][0])} files), checkpoint+metadata "
                      f"identical={same[1]}, raw.jsonl identical={same[2]} (second eval with --jobs 2)")
    assert ok
