"""Camera-aware referring fields on frozen 3D Gaussian scenes."""

from .camera import Camera, camera_descriptor, look_at, ring_cameras
from .eval import EvalReport, evaluate, gt_mask, iou
from .referring import ReferringModel, toy_embed
from .scene import GaussianScene, generate_scene, load_scene, save_scene
from .training import TrainConfig, Trainer, init_model, train

__version__ = "0.1.0"
