import click

from ..checkpoints import checkpoint_id, load_checkpoint
from ..config import Config
from ..imaging import load_image, save_image
from ..overlay import render_overlay
from ..pipeline import crop_and_resize, recognize_structure
from ..serializers import load_json, parse_page_json
from . import MANIFEST, handles_errors, write_manifest


@click.command("overlay")
@click.argument("image_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("result_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--tsr-checkpoint", type=click.Path(dir_okay=False), default=None,
              help="re-run the splitter to draw separator heatmaps and grid lines")
@click.option("--device", default=Config.DEVICE, show_default=True)
@handles_errors
def overlay_cmd(image_path, result_path, out_path, tsr_checkpoint, device):
    """Draw detections and cells of a pipeline result over its page image."""
    image = load_image(image_path)
    h, w = image.shape[:2]
    page = parse_page_json(load_json(result_path), w, h)

    model = load_checkpoint(tsr_checkpoint, "tsr", device) if tsr_checkpoint else None
    checkpoints = {"tsr": checkpoint_id(tsr_checkpoint)} if tsr_checkpoint else {}
    write_manifest(f"{out_path}.{MANIFEST}", "overlay", None, None, [image_path, result_path], [out_path], checkpoints)

    debug = []
    if model is not None:
        for table in page.tables:
            crop, transform = crop_and_resize(image, table.detection.quad)
            debug.append((transform, recognize_structure(model, crop)))
    save_image(out_path, render_overlay(image, page, debug))
