"""Gated channel transformation (GCT) layers and a small numpy CNN stack around them."""
from .gct import Adaptation, ChannelNorm, EmbedNorm, GctParams, gct_backward, gct_forward
from .network import NetworkSpec, build_network, load_checkpoint, resolve_spec, save_checkpoint

__all__ = ["Adaptation", "ChannelNorm", "EmbedNorm", "GctParams", "gct_forward", "gct_backward",
           "NetworkSpec", "build_network", "resolve_spec", "save_checkpoint", "load_checkpoint"]
