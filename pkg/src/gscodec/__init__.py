"""Compact 3D Gaussian splat codec: learnable masking, residual VQ geometry,
hash-grid color fields, post-processing and a CPU splat renderer."""

from .colorfield import ColorField, DistillConfig, FieldConfig, distill_train, precompute_features, query_color
from .container import CompactScene, DecodeError, PostprocFlags, decode_file, encode_file, stats, storage_model
from .masking import MaskConfig, MaskState, apply_mask, masking_loss, prune, train_mask
from .model import CameraPose, GaussianCloud, covariance_from, evaluate_sh, load_ply, save_ply
from .pipeline import RunConfig, compress, sweep
from .postproc import QuantizedTensor, bitpack, bitunpack, dequantize, huffman_decode, huffman_encode, prune_hash, quantize_u8
from .render import RenderSettings, SplatView, psnr, rasterize, render, render_loss, ssim
from .rvq import RvqCodec, decode as rvq_decode, encode as rvq_encode, train_rvq

__version__ = "0.1.0"
