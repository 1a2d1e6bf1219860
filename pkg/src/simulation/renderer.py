"""
Frame renderer for the synthetic sensor.

Contact tint and marker dots are rasterised on a supersampled grid and box-filtered
down, which anti-aliases the edges; labels come from the same geometry.
"""

import logging
from typing import Tuple

import cv2
import numpy as np

from src.core.imaging import BinaryMask, Frame
from src.core.segmentation import area_fraction
from src.simulation.sensor import (
    ContactRegion,
    GroundTruth,
    SceneSpec,
    SensorModel,
    deformation_vectors,
    slip_ground_truth,
    tint_alpha,
)
from src.utils.error_handling import SpecError

# Set up logging
logger = logging.getLogger(__name__)

_SUBPIXEL_SHIFT = 8


def _marker_coverage(model: SensorModel, centers: np.ndarray) -> np.ndarray:
    s = model.supersample
    canvas = np.zeros((model.height * s, model.width * s), dtype=np.uint8)
    scale = 1 << _SUBPIXEL_SHIFT
    radius = int(round(model.dot_radius_px * s * scale))
    for x, y in centers:
        center = (int(round(((x + 0.5) * s - 0.5) * scale)), int(round(((y + 0.5) * s - 0.5) * scale)))
        cv2.circle(canvas, center, radius, 1, thickness=cv2.FILLED, lineType=cv2.LINE_8, shift=_SUBPIXEL_SHIFT)
    return canvas.reshape(model.height, s, model.width, s).mean(axis=(1, 3))


def render_frame(model: SensorModel, scene: SceneSpec, index: int = 0) -> Tuple[Frame, GroundTruth]:
    """
    Render one sensor image and its labels.

    Args:
        model: Sensor geometry and colours
        scene: Contact situation; scene.seed drives the noise
        index: Frame index stored on the returned Frame

    Returns:
        (Frame, GroundTruth)

    Raises:
        SpecError: If the scene geometry is invalid for the model
    """
    region = ContactRegion(model, scene)
    rest = model.marker_positions()
    displacements = deformation_vectors(model, scene, rest, region)
    positions = rest + displacements

    visible = np.ones(len(rest), dtype=bool)
    for i in scene.hidden_markers:
        if not 0 <= i < len(rest):
            raise SpecError(f"Hidden marker index {i} outside 0..{len(rest) - 1}")
        visible[i] = False

    margin = model.dot_radius_px
    off_image = ((positions[:, 0] < margin - 0.5) | (positions[:, 0] > model.width - 0.5 - margin)
                 | (positions[:, 1] < margin - 0.5) | (positions[:, 1] > model.height - 0.5 - margin))
    if np.any(off_image & visible):
        raise SpecError("Displaced markers leave the image; reduce shear or shift")

    canvas = np.empty((model.height, model.width, 3), dtype=np.float64)
    canvas[:] = model.background

    contact_coverage = region.coverage(model.supersample)
    if region.kind != "none":
        alpha = tint_alpha(scene.depth_mm) * contact_coverage[..., None]
        canvas = canvas * (1.0 - alpha) + np.asarray(model.contact_color, dtype=np.float64) * alpha

    dots = _marker_coverage(model, positions[visible])[..., None]
    canvas = canvas * (1.0 - dots) + np.asarray(model.marker_color, dtype=np.float64) * dots

    if model.noise_sigma > 0:
        rng = np.random.default_rng(scene.seed)
        canvas = canvas + rng.normal(0.0, model.noise_sigma, size=canvas.shape)

    data = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    mask = BinaryMask(contact_coverage >= 0.5)

    in_contact = region.signed_distance(rest) >= 0
    truth = GroundTruth(
        mask=mask,
        marker_positions=positions,
        displacements=displacements,
        visible=visible,
        in_contact=in_contact,
        slip=slip_ground_truth(model, scene, in_contact, visible),
        area_fraction=area_fraction(mask, model.sensing_roi()),
    )
    return Frame(data=data, index=index), truth
