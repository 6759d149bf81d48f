"""Peak-memory profiling of decoding/synthesis strategies.

Two numbers per (task, strategy, resolution) point:

* analytic  — activation accounting from shape arithmetic under a simple
              liveness model (input + output of each layer live at once,
              times the processing batch), plus resident latents and
              parameters. Portable; this is the acceptance quantity.
* measured  — the OS-reported high-water mark (``ru_maxrss``) of a fresh
              subprocess running the task, plus the growth between task
              start and end. Validates the analytic ordering on the
              machine at hand.

Strategies: ``slice-wise-decode`` processes one k-window at a time, so
activations are independent of the volume depth D; ``holistic-3D-decode``
pushes the whole slice stack through the decoder at once, so activations
scale linearly with D. The resolution ladder varies D at fixed slice
resolution. The output sink is excluded (slices are discarded).
"""

from __future__ import annotations

import json
import resource
import subprocess
import sys
from dataclasses import dataclass

import torch

from .config import RunConfig
from .errors import ValidationError
from .nhae import NHAE

STRATEGIES = ("slice-wise-decode", "holistic-3D-decode")
TASKS = ("decode", "full-synthesis")
FLOAT_BYTES = 4


class NullSink:
    """Discards decoded slices; keeps sinks out of the measurement."""

    def __init__(self, shape):
        self.shape = shape
        self.count = 0

    def write(self, index, image):
        self.count += 1

    def result(self):
        return self.count


@dataclass
class MemoryReport:
    task: str
    strategy: str
    depth: int
    parameters: int = 0
    activations: int = 0
    latents: int = 0
    measured_peak: int | None = None
    measured_delta: int | None = None
    status: str = "ok"

    @property
    def analytic_total(self) -> int:
        return self.parameters + self.activations + self.latents

    @property
    def peak(self) -> int:
        """Headline peak: measured when available, else analytic."""
        return self.measured_peak if self.measured_peak else self.analytic_total

    def breakdown(self) -> dict[str, int]:
        return {"parameters": self.parameters, "activations": self.activations,
                "latents": self.latents}


def depth_config(cfg: RunConfig, depth: int) -> RunConfig:
    """Rescale the config to a different volume depth, keeping the depth
    upsampling factor and the slice resolution fixed."""
    factor = cfg.depth_factor
    if depth % factor:
        raise ValidationError(
            f"ladder depth {depth} not divisible by the depth factor {factor}")
    return cfg.replace(depth=depth, latent_depth=depth // factor).validate()


def decoder_stage_plan(nhae: NHAE) -> list[tuple[int, int]]:
    """(elements_in, elements_out) per module call for one latent slice
    through the decoder chain."""
    cfg = nhae.cfg
    chans = nhae.decoder2d.chans
    factors = nhae.decoder2d.factors
    n_up = len(factors)
    h, w = cfg.latent_height, cfg.latent_width
    plan = [(cfg.latent_channels * h * w, chans[0] * h * w)]
    for i in range(n_up + 1):
        cin = chans[i]
        cout = chans[min(i + 1, n_up)]
        plan.append((cin * h * w, cout * h * w))   # res block
        plan.append((cout * h * w, cout * h * w))  # adaptor
        if i < n_up:
            f = factors[i]
            plan.append((cout * h * w, cout * h * f * w * f))
            h, w = h * f, w * f
    plan.append((chans[-1] * h * w, 1 * h * w))    # output head
    return plan


def analytic_report(cfg: RunConfig, task: str, strategy: str,
                    depth: int) -> MemoryReport:
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    if strategy not in STRATEGIES:
        raise ValidationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    dcfg = depth_config(cfg, depth)
    torch.manual_seed(0)
    nhae = NHAE(dcfg)
    plan = decoder_stage_plan(nhae)
    batch = dcfg.window if strategy == "slice-wise-decode" else dcfg.depth
    act = max(batch * (ein + eout) for ein, eout in plan) * FLOAT_BYTES
    if strategy == "slice-wise-decode":
        act += dcfg.height * dcfg.width * FLOAT_BYTES  # the emitted slice

    c = dcfg.latent_channels
    lat = c * dcfg.depth * dcfg.latent_height * dcfg.latent_width  # resident z_sr
    params = sum(p.numel() for p in nhae.parameters())
    if task == "full-synthesis":
        from . import diffusion as dmod
        d3 = dmod.Denoiser3d(c, c, dcfg.unet_base)
        d2 = dmod.Denoiser2d(2 * c, c, dcfg.unet_base)
        params += sum(p.numel() for p in d3.parameters())
        params += sum(p.numel() for p in d2.parameters())
        # z plus the refined sequence held alongside z_sr
        lat += c * dcfg.latent_depth * dcfg.latent_height * dcfg.latent_width
        lat += c * dcfg.depth * dcfg.latent_height * dcfg.latent_width
        refiner_act = 32 * 2 * dcfg.unet_base * dcfg.latent_height \
            * dcfg.latent_width * FLOAT_BYTES
        act = max(act, refiner_act)
    return MemoryReport(task=task, strategy=strategy, depth=depth,
                        parameters=params * FLOAT_BYTES,
                        activations=act, latents=lat * FLOAT_BYTES)


# ----------------------------------------------------------------------
# measured path (runs in a fresh subprocess for an honest high-water mark)

def _rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _run_task(cfg: RunConfig, task: str, strategy: str, depth: int,
              manifest: str | None) -> None:
    from .pipeline import CascadeBundle, load_bundle, synthesize_volume

    dcfg = depth_config(cfg, depth)
    if manifest:
        base = load_bundle(manifest)
        bundle = CascadeBundle.initialize(dcfg)
        bundle.nhae.load_state_dict(base.nhae.state_dict())
        bundle.diff3d.load_state_dict(base.diff3d.state_dict())
        bundle.diffslice.load_state_dict(base.diffslice.state_dict())
        bundle.scale3d, bundle.scale_slice = base.scale3d, base.scale_slice
        del base
    else:
        bundle = CascadeBundle.initialize(dcfg)
    sink = NullSink(dcfg.volume_shape)
    if task == "decode":
        g = torch.Generator().manual_seed(0)
        z_seq = torch.randn((dcfg.latent_channels, dcfg.depth,
                             dcfg.latent_height, dcfg.latent_width), generator=g)
        if strategy == "slice-wise-decode":
            bundle.nhae.decode_volume(z_seq, sink)
        else:
            bundle.nhae.decode_volume_holistic(z_seq, sink)
    else:
        if strategy == "holistic-3D-decode":
            # synthesize latents, then decode holistically
            from .pipeline import refine_latent_slices, synthesize_global_latent
            z = synthesize_global_latent(bundle, 0)
            z_sr = bundle.nhae.uniaxial_superres(z)
            refined = refine_latent_slices(bundle, z_sr, 0)
            bundle.nhae.decode_volume_holistic(
                refined.permute(1, 0, 2, 3).contiguous(), sink)
        else:
            synthesize_volume(bundle, 0, refine=True, sink=sink)


def _child_main(argv) -> int:
    spec = json.loads(argv[0])
    cfg = RunConfig.from_dict(spec["config"])
    before = _rss_bytes()
    status = "ok"
    try:
        _run_task(cfg, spec["task"], spec["strategy"], spec["depth"],
                  spec.get("manifest"))
    except MemoryError:
        status = "oom"
    after = _rss_bytes()
    print(json.dumps({"peak": after, "delta": max(0, after - before),
                      "status": status}))
    return 0


def measured_peak(cfg: RunConfig, task: str, strategy: str, depth: int,
                  manifest: str | None = None,
                  timeout: float = 600.0) -> tuple[int | None, int | None, str]:
    """Spawn a fresh interpreter for one (task, strategy, depth) run and
    collect its lifetime RSS high-water plus the growth during the task."""
    spec = {"config": cfg.to_dict(), "task": task, "strategy": strategy,
            "depth": depth, "manifest": str(manifest) if manifest else None}
    try:
        proc = subprocess.run(
            [sys.executable, "-m", "volsynth.memprof", json.dumps(spec)],
            capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        return None, None, "timeout"
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "?"
        return None, None, f"error: {tail}"
    out = json.loads(proc.stdout.strip().splitlines()[-1])
    return int(out["peak"]), int(out["delta"]), out["status"]


def profile_peak_memory(task: str, strategy: str, resolution: int,
                        config: RunConfig, manifest: str | None = None,
                        measure: bool = True) -> MemoryReport:
    """One profiling point; see the module docstring for semantics."""
    report = analytic_report(config, task, strategy, resolution)
    if measure:
        peak, delta, status = measured_peak(config, task, strategy, resolution,
                                            manifest)
        report.measured_peak = peak
        report.measured_delta = delta
        if status != "ok":
            report.status = status
    return report


def profile_ladder(task: str, resolutions, config: RunConfig,
                   manifest: str | None = None, measure: bool = True,
                   strategies=STRATEGIES) -> list[MemoryReport]:
    return [profile_peak_memory(task, strategy, depth, config, manifest, measure)
            for strategy in strategies for depth in resolutions]


def reports_csv(reports: list[MemoryReport]) -> str:
    header = ("task,strategy,depth,parameters_bytes,activations_bytes,"
              "latents_bytes,analytic_total_bytes,measured_peak_bytes,"
              "measured_delta_bytes,status")
    rows = [header]
    for r in reports:
        rows.append(",".join(str(x) for x in (
            r.task, r.strategy, r.depth, r.parameters, r.activations,
            r.latents, r.analytic_total,
            r.measured_peak if r.measured_peak is not None else "",
            r.measured_delta if r.measured_delta is not None else "",
            r.status)))
    return "\n".join(rows) + "\n"


if __name__ == "__main__":
    sys.exit(_child_main(sys.argv[1:]))
