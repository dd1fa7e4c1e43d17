"""Gradient-based attention maps (Grad-CAM family) for small numpy CNNs, 2D and 3D."""
from camkit.backends import (
    BACKENDS,
    AttentionMap,
    ClassSpec,
    generate,
    grad_cam,
    grad_cam_pp,
    guided_backprop,
    guided_grad_cam,
    isolate_class,
    normalize_map,
)
from camkit.evaluation import EvaluationRecord, Evaluator, dump, evaluate
from camkit.graph import (
    INPUT,
    ActivationCache,
    LayerNode,
    ModelGraph,
    backward_from_output,
    forward,
    forward_recorded,
    list_layers,
    load_model,
    resolve_layer_spec,
    save_model,
)

__version__ = "0.1.0"
