"""Normal and dilated ResNets with a from-scratch convolution and autodiff engine."""
from .convolution import ConvSpec, LayerGeometry, PoolSpec, conv2d, conv2d_grad, layer_geometry, \
    receptive_field_of_network
from .kernels import active_backend
from .resnet import ArchSpec, BlockSpec, Network, audit, build, forward

__version__ = "0.1.0"
