"""Command-line interface: stylize, sweep, interp, heatmap, train, evaluate."""

import json
from pathlib import Path

import click
import numpy as np

from .imageops import save_image
from .pipeline import StylizationPipeline, StylizeRequest, attention_diff_heatmap

_checkpoint_option = click.option(
    "--checkpoint", envvar="DIFFNST_CHECKPOINT", required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Training checkpoint directory (env: DIFFNST_CHECKPOINT).")


def _request(content, style, out, noise_start, noise_end, attn_stop, color_match, seed):
    return StylizeRequest(content=content, style=style, output=out,
                          noise_start=noise_start, noise_end=noise_end,
                          attn_stop=attn_stop, color_match=color_match, seed=seed)


def _pair_options(fn):
    fn = click.option("--content", required=True, type=click.Path(exists=True,
                      dir_okay=False), help="Content image (PNG).")(fn)
    fn = click.option("--style", required=True, type=click.Path(exists=True,
                      dir_okay=False), help="Style image (PNG).")(fn)
    fn = click.option("--out", required=True, type=click.Path(file_okay=False),
                      help="Output directory.")(fn)
    fn = click.option("--noise-start", type=int, default=None,
                      help="First sampling step with injected content noise.")(fn)
    fn = click.option("--noise-end", type=int, default=None,
                      help="Sampling step (exclusive) where injection stops.")(fn)
    fn = click.option("--attn-stop", type=int, default=None,
                      help="Sampling step after which attention edits stop.")(fn)
    fn = click.option("--color-match/--no-color-match", default=True,
                      help="Pre-adjust content colors to the style image.")(fn)
    fn = click.option("--seed", type=int, default=0)(fn)
    return fn


@click.group()
def main():
    """Deformable neural style transfer over a miniature latent diffusion model."""


@main.command()
@_checkpoint_option
@_pair_options
def stylize(checkpoint, content, style, out, noise_start, noise_end, attn_stop,
            color_match, seed):
    """Stylize one content/style pair."""
    pipeline = StylizationPipeline.from_checkpoint(checkpoint)
    request = _request(content, style, out, noise_start, noise_end, attn_stop,
                       color_match, seed)
    pipeline.stylize(request)
    click.echo(str(Path(out) / request.pair_name() / "stylized.png"))


@main.command()
@_checkpoint_option
@_pair_options
@click.option("--axis", type=click.Choice(["noise_start", "attn_stop"]), required=True)
@click.option("--values", required=True,
              help="Comma-separated sorted sampling-step values, e.g. 1,3,5,7.")
def sweep(checkpoint, content, style, out, noise_start, noise_end, attn_stop,
          color_match, seed, axis, values):
    """Sweep one inference control across a list of values."""
    pipeline = StylizationPipeline.from_checkpoint(checkpoint)
    request = _request(content, style, out, noise_start, noise_end, attn_stop,
                       color_match, seed)
    parsed = [int(v) for v in values.split(",") if v.strip() != ""]
    pipeline.sweep(request, axis, parsed)
    click.echo(str(Path(out) / request.pair_name() / f"sweep_{axis}.png"))


@main.command()
@_checkpoint_option
@_pair_options
@click.option("--alphas", default="0,0.5,1",
              help="Comma-separated interpolation strengths; >1 is over-drive.")
def interp(checkpoint, content, style, out, noise_start, noise_end, attn_stop,
           color_match, seed, alphas):
    """Interpolate V values between the reconstruction and the stylized run."""
    pipeline = StylizationPipeline.from_checkpoint(checkpoint)
    request = _request(content, style, out, noise_start, noise_end, attn_stop,
                       color_match, seed)
    parsed = [float(a) for a in alphas.split(",") if a.strip() != ""]
    pipeline.interpolate_pair(request, parsed)
    click.echo(str(Path(out) / request.pair_name() / "interp"))


@main.command()
@_checkpoint_option
@_pair_options
def heatmap(checkpoint, content, style, out, noise_start, noise_end, attn_stop,
            color_match, seed):
    """Render the per-site/per-step attention difference heatmap."""
    pipeline = StylizationPipeline.from_checkpoint(checkpoint)
    request = _request(content, style, out, noise_start, noise_end, attn_stop,
                       color_match, seed)
    _, recon_trace, stylized_trace = pipeline.capture_traces(request)
    recon_sub = type(recon_trace)(
        entries={k: v for k, v in recon_trace.entries.items()
                 if k in stylized_trace.entries},
        source_fingerprint=recon_trace.source_fingerprint,
        resolution=recon_trace.resolution, num_steps=recon_trace.num_steps)
    out_dir = Path(out) / request.pair_name()
    site_order = [s.site_id for s in pipeline.backbone.enumerate_attention_sites()]
    matrix = attention_diff_heatmap(recon_sub, stylized_trace, site_order=site_order,
                                    out_png=out_dir / "heatmap.png")
    (out_dir / "heatmap.json").write_text(json.dumps(matrix.tolist()))
    click.echo(str(out_dir / "heatmap.png"))


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Training configuration JSON.")
@click.option("--resume", type=click.Path(exists=True, file_okay=False), default=None,
              help="Resume from a training checkpoint directory.")
@click.option("--progress/--no-progress", default=True)
def train(config_path, resume, progress):
    """Run the unrolled style-transfer training loop."""
    from .trainer import StyleTransferTrainer, TrainConfig
    config = TrainConfig.from_json_dict(json.loads(Path(config_path).read_text()))
    if resume:
        trainer = StyleTransferTrainer.load_checkpoint(resume)
    else:
        trainer = StyleTransferTrainer(config)
    final = trainer.train(progress=progress)
    click.echo(str(final))


@main.command()
@click.option("--results", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of stylization result folders.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Where to write the JSON report.")
@click.option("--sample-n", type=int, default=4096, help="Chamfer pixel samples.")
@click.option("--seed", type=int, default=0)
def evaluate(results, out_path, sample_n, seed):
    """Compute SIFID / Chamfer / perceptual metrics over a results directory."""
    from .metrics import evaluate_corpus
    report = evaluate_corpus(results, sample_n=sample_n, seed=seed, out_path=out_path)
    click.echo(json.dumps(report.means))


if __name__ == "__main__":
    main()
