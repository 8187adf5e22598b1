"""
Pile numérique dense minimale : couches affines et convolutions 1-D avec
gradients analytiques, optimiseur Adam et vérification par différences finies.

Les gradients sont dérivés à la main couche par couche (pas de graphe de calcul
général) et vérifiés par différences finies centrées en float64.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rotation.models import Activation
from rotlab.utils.error_manage import TrainingError, UsageError, ValidationError

logger = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


def activate(pre, activation):
    if activation is Activation.ELU:
        return np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0)))
    if activation is Activation.RELU:
        return np.maximum(pre, 0)
    if activation is Activation.TANH:
        return np.tanh(pre)
    return pre


def activation_grad(pre, out, activation):
    """Dérivée de l'activation, exprimée à partir de l'entrée et de la sortie."""
    if activation is Activation.ELU:
        return np.where(pre > 0, 1.0, out + 1.0).astype(pre.dtype)
    if activation is Activation.RELU:
        return (pre > 0).astype(pre.dtype)
    if activation is Activation.TANH:
        return 1.0 - out * out
    return np.ones_like(pre)


def init_bound(activation, fan_in, fan_out):
    # Kaiming-uniform pour relu/elu, Xavier-uniform pour tanh/identité
    if activation in (Activation.RELU, Activation.ELU):
        return np.sqrt(6.0 / fan_in)
    return np.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation

    @property
    def in_width(self):
        return self.weight.shape[0]

    @property
    def out_width(self):
        return self.weight.shape[1]


class DenseNet:
    """Perceptron multicouche ; ``weight`` est (entrée, sortie)."""

    def __init__(self, layers):
        if not layers:
            raise ValidationError("A DenseNet needs at least one layer")
        for i, layer in enumerate(layers):
            if not isinstance(layer.activation, Activation):
                raise ValidationError(f"Unknown activation tag on layer {i}", field='activation')
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ValidationError(f"Layer {i} has inconsistent weight/bias shapes",
                                      details={'weight': layer.weight.shape, 'bias': layer.bias.shape})
            if i > 0 and layers[i - 1].out_width != layer.in_width:
                raise ValidationError(f"Layer {i} input width {layer.in_width} does not match "
                                      f"previous output width {layers[i - 1].out_width}")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValidationError(f"Layer {i} has non-finite parameters")
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def build(cls, sizes, hidden, output, rng, dtype=TRAIN_DTYPE, zero_last=False, last_scale=1.0):
        """Construit un réseau initialisé de manière reproductible.

        Args:
            sizes (list): Largeurs [entrée, cachées..., sortie].
            hidden (Activation): Activation des couches cachées.
            output (Activation): Activation de la couche de sortie.
            rng (np.random.Generator): Générateur dédié à l'initialisation.
            dtype (np.dtype, optional): Précision des paramètres. Defaults to float32.
            zero_last (bool, optional): Met la dernière couche à zéro. Defaults to False.
            last_scale (float, optional): Facteur sur les poids de la dernière couche. Defaults to 1.0.

        Returns:
            DenseNet: Le réseau construit.
        """
        layers = []
        n = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            activation = output if i == n - 1 else hidden
            bound = init_bound(activation, fan_in, fan_out)
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == n - 1:
                weight = np.zeros_like(weight) if zero_last else weight * last_scale
            layers.append(DenseLayer(weight.astype(dtype), np.zeros(fan_out, dtype=dtype), activation))
        return cls(layers)

    @property
    def in_width(self):
        return self.layers[0].in_width

    @property
    def out_width(self):
        return self.layers[-1].out_width

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def shapes(self):
        return [(layer.in_width, layer.out_width, layer.activation.value) for layer in self.layers]

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def touch(self):
        self.version += 1

    def astype(self, dtype):
        return DenseNet([DenseLayer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation)
                         for l in self.layers])

    def copy(self):
        return self.astype(self.dtype)

    def to_tensors(self, prefix):
        tensors = []
        for i, layer in enumerate(self.layers):
            tag = f"dense:{layer.activation.value}"
            tensors.append((f"{prefix}.{i}.weight", tag, layer.weight))
            tensors.append((f"{prefix}.{i}.bias", tag, layer.bias))
        return tensors

    @classmethod
    def from_tensors(cls, tensors):
        layers = []
        for (w_name, tag, weight), (_, _, bias) in zip(tensors[0::2], tensors[1::2]):
            kind, _, act = tag.partition(':')
            if kind != 'dense':
                raise ValidationError(f"Tensor {w_name} is not a dense layer", details={'tag': tag})
            layers.append(DenseLayer(np.asarray(weight, dtype=TRAIN_DTYPE),
                                     np.asarray(bias, dtype=TRAIN_DTYPE), Activation(act)))
        return cls(layers)


@dataclass
class DenseCache:
    net_id: int
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def dense_forward(net, x):
    """Propagation avant d'un DenseNet sur un lot de vecteurs.

    Args:
        net (DenseNet): Le réseau.
        x (np.ndarray): Lot (B, entrée) ou vecteur (entrée,).

    Raises:
        ValidationError: Si la largeur de x ne correspond pas à la première couche.

    Returns:
        tuple: (sortie, DenseCache) ; la sortie garde la forme vecteur si x en était un.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.in_width:
        raise ValidationError(f"Input width {x.shape[-1]} does not match network input {net.in_width}",
                              field='x')
    cache = DenseCache(net_id=id(net), version=net.version)
    h = x.astype(net.dtype, copy=False)
    for layer in net.layers:
        pre = h @ layer.weight + layer.bias
        out = activate(pre, layer.activation)
        cache.inputs.append(h)
        cache.pre.append(pre)
        cache.outputs.append(out)
        h = out
    return (h[0] if squeeze else h), cache


def dense_backward(net, cache, grad_out):
    """Rétropropagation à travers un DenseNet.

    Args:
        net (DenseNet): Le réseau utilisé pour la propagation avant.
        cache (DenseCache): Le cache produit par ``dense_forward``.
        grad_out (np.ndarray): Gradient de la perte par rapport à la sortie.

    Raises:
        UsageError: Si le cache provient d'un autre réseau ou d'une version antérieure des paramètres.

    Returns:
        tuple: (gradients alignés sur ``net.parameters()``, gradient par rapport à l'entrée)
    """
    if cache.net_id != id(net) or cache.version != net.version or len(cache.pre) != len(net.layers):
        raise UsageError("Stale or mismatched forward cache", field='cache')
    grad = np.asarray(grad_out, dtype=net.dtype)
    if grad.ndim == 1:
        grad = grad[None, :]
    grads = [None] * (2 * len(net.layers))
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        dpre = grad * activation_grad(cache.pre[i], cache.outputs[i], layer.activation)
        grads[2 * i] = cache.inputs[i].T @ dpre
        grads[2 * i + 1] = dpre.sum(axis=0)
        grad = dpre @ layer.weight.T
    if np.asarray(grad_out).ndim == 1:
        grad = grad[0]
    return grads, grad


@dataclass
class ConvLayer:
    weight: np.ndarray   # (sortie, entrée, noyau)
    bias: np.ndarray
    stride: int
    activation: Activation = Activation.RELU

    @property
    def kernel(self):
        return self.weight.shape[2]


def conv_output_length(length, kernel, stride):
    return (length - kernel) // stride + 1


class ConvStack:
    """Encodeur par pas de temps, convolutions 1-D sur le temps, projection linéaire."""

    def __init__(self, encoder, convs, projection, history_len):
        self.encoder = encoder
        self.convs = list(convs)
        self.projection = projection
        self.history_len = int(history_len)
        self.lengths = self.temporal_lengths(self.history_len, [(c.kernel, c.stride) for c in self.convs])
        channels = encoder.out_width
        for i, conv in enumerate(self.convs):
            if conv.weight.shape[1] != channels:
                raise ValidationError(f"Conv layer {i} expects {conv.weight.shape[1]} channels, got {channels}")
            channels = conv.weight.shape[0]
        if projection.in_width != channels * self.lengths[-1]:
            raise ValidationError(f"Projection input {projection.in_width} does not match flattened "
                                  f"conv output {channels}x{self.lengths[-1]}")
        self.version = 0

    @staticmethod
    def temporal_lengths(history_len, specs):
        """Longueurs temporelles successives ; lève une erreur de configuration si l'une est < 1."""
        lengths = [history_len]
        for kernel, stride in specs:
            nxt = conv_output_length(lengths[-1], kernel, stride)
            if nxt < 1:
                raise ValidationError(
                    f"Receptive field exceeds history: length {lengths[-1]} with kernel {kernel}, stride {stride}",
                    field='history_len', details={'lengths': lengths})
            lengths.append(nxt)
        return lengths

    @classmethod
    def build(cls, step_width, encoder_sizes, conv_specs, out_width, history_len, rng,
              output=Activation.TANH, dtype=TRAIN_DTYPE):
        """Construit le module d'adaptation.

        Args:
            step_width (int): Largeur d'un pas (paire position/action).
            encoder_sizes (list): Largeurs cachées de l'encodeur par pas, ex. [32, 32].
            conv_specs (list): Liste de (entrée, sortie, noyau, pas).
            out_width (int): Largeur de l'estimation produite.
            history_len (int): Longueur de fenêtre T.
            rng (np.random.Generator): Générateur d'initialisation.
            output (Activation, optional): Activation de la projection. Defaults to tanh.

        Returns:
            ConvStack: Le module construit.
        """
        lengths = cls.temporal_lengths(history_len, [(k, s) for _, _, k, s in conv_specs])
        encoder = DenseNet.build([step_width] + list(encoder_sizes), Activation.RELU, Activation.RELU,
                                 rng, dtype=dtype)
        convs = []
        for c_in, c_out, kernel, stride in conv_specs:
            bound = init_bound(Activation.RELU, c_in * kernel, c_out * kernel)
            weight = rng.uniform(-bound, bound, size=(c_out, c_in, kernel)).astype(dtype)
            convs.append(ConvLayer(weight, np.zeros(c_out, dtype=dtype), int(stride)))
        flat = conv_specs[-1][1] * lengths[-1]
        projection = DenseNet.build([flat, out_width], output, output, rng, dtype=dtype)
        return cls(encoder, convs, projection, history_len)

    @property
    def step_width(self):
        return self.encoder.in_width

    @property
    def out_width(self):
        return self.projection.out_width

    @property
    def dtype(self):
        return self.projection.dtype

    def parameters(self):
        params = list(self.encoder.parameters())
        for conv in self.convs:
            params.extend([conv.weight, conv.bias])
        params.extend(self.projection.parameters())
        return params

    def touch(self):
        self.version += 1
        self.encoder.touch()
        self.projection.touch()

    def astype(self, dtype):
        convs = [ConvLayer(c.weight.astype(dtype), c.bias.astype(dtype), c.stride, c.activation)
                 for c in self.convs]
        return ConvStack(self.encoder.astype(dtype), convs, self.projection.astype(dtype), self.history_len)

    def to_tensors(self, prefix):
        tensors = self.encoder.to_tensors(f"{prefix}.encoder")
        for i, conv in enumerate(self.convs):
            tag = f"conv:{conv.activation.value}:s{conv.stride}"
            tensors.append((f"{prefix}.conv.{i}.weight", tag, conv.weight))
            tensors.append((f"{prefix}.conv.{i}.bias", tag, conv.bias))
        tensors.extend(self.projection.to_tensors(f"{prefix}.projection"))
        return tensors

    @classmethod
    def from_tensors(cls, tensors, history_len):
        encoder = [t for t in tensors if '.encoder.' in t[0]]
        convs = [t for t in tensors if '.conv.' in t[0]]
        projection = [t for t in tensors if '.projection.' in t[0]]
        layers = []
        for (_, tag, weight), (_, _, bias) in zip(convs[0::2], convs[1::2]):
            _, act, stride = tag.split(':')
            layers.append(ConvLayer(np.asarray(weight, dtype=TRAIN_DTYPE), np.asarray(bias, dtype=TRAIN_DTYPE),
                                    int(stride[1:]), Activation(act)))
        return cls(DenseNet.from_tensors(encoder), layers, DenseNet.from_tensors(projection), history_len)


@dataclass
class ConvCache:
    stack_id: int
    version: int
    batch: int
    encoder: DenseCache = None
    windows: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    input_lengths: list = field(default_factory=list)
    projection: DenseCache = None
    squeeze: bool = False


def conv_forward(stack, history):
    """Propagation avant du module temporel.

    Args:
        stack (ConvStack): Le module.
        history (np.ndarray): Fenêtre (T, D) ou lot de fenêtres (B, T, D).

    Raises:
        UsageError: Si T ou D ne correspondent pas à la configuration.

    Returns:
        tuple: (estimation (sortie,) ou (B, sortie), ConvCache)
    """
    history = np.asarray(history)
    squeeze = history.ndim == 2
    if squeeze:
        history = history[None]
    batch, length, width = history.shape
    if length != stack.history_len:
        raise UsageError(f"History length {length} does not match configured T={stack.history_len}",
                         field='history')
    if width != stack.step_width:
        raise UsageError(f"Per-step width {width} does not match encoder input {stack.step_width}",
                         field='history')
    cache = ConvCache(stack_id=id(stack), version=stack.version, batch=batch, squeeze=squeeze)
    encoded, cache.encoder = dense_forward(stack.encoder, history.reshape(batch * length, width))
    # (B, C, L) : canaux puis temps
    h = encoded.reshape(batch, length, -1).transpose(0, 2, 1)
    for conv in stack.convs:
        windows = sliding_window_view(h, conv.kernel, axis=2)[:, :, ::conv.stride, :]
        pre = np.einsum('bclk,ock->bol', windows, conv.weight) + conv.bias[None, :, None]
        out = activate(pre, conv.activation)
        cache.input_lengths.append(h.shape[2])
        cache.windows.append(windows)
        cache.pre.append(pre)
        cache.outputs.append(out)
        h = out
    flat = h.reshape(batch, -1)
    z, cache.projection = dense_forward(stack.projection, flat)
    return (z[0] if squeeze else z), cache


def conv_backward(stack, cache, grad_out):
    """Rétropropagation à travers le module temporel.

    Returns:
        tuple: (gradients alignés sur ``stack.parameters()``, gradient par rapport à la fenêtre)
    """
    if cache.stack_id != id(stack) or cache.version != stack.version:
        raise UsageError("Stale or mismatched forward cache", field='cache')
    grad_out = np.asarray(grad_out, dtype=stack.dtype)
    if cache.squeeze and grad_out.ndim == 1:
        grad_out = grad_out[None]
    proj_grads, grad_flat = dense_backward(stack.projection, cache.projection, grad_out)
    c_last = stack.convs[-1].weight.shape[0] if stack.convs else stack.encoder.out_width
    grad = grad_flat.reshape(cache.batch, c_last, -1)
    conv_grads = []
    for i in reversed(range(len(stack.convs))):
        conv = stack.convs[i]
        dpre = grad * activation_grad(cache.pre[i], cache.outputs[i], conv.activation)
        d_weight = np.einsum('bol,bclk->ock', dpre, cache.windows[i])
        d_bias = dpre.sum(axis=(0, 2))
        out_len = dpre.shape[2]
        span = conv.stride * (out_len - 1) + 1
        dx = np.zeros((cache.batch, conv.weight.shape[1], cache.input_lengths[i]), dtype=stack.dtype)
        for k in range(conv.kernel):
            dx[:, :, k:k + span:conv.stride] += np.einsum('bol,oc->bcl', dpre, conv.weight[:, :, k])
        conv_grads = [d_weight, d_bias] + conv_grads
        grad = dx
    grad_encoded = grad.transpose(0, 2, 1).reshape(cache.batch * stack.history_len, -1)
    enc_grads, grad_x = dense_backward(stack.encoder, cache.encoder, grad_encoded)
    grad_x = grad_x.reshape(cache.batch, stack.history_len, -1)
    if cache.squeeze:
        grad_x = grad_x[0]
    return enc_grads + conv_grads + proj_grads, grad_x


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state):
    """Applique une mise à jour Adam avec correction de biais, en place.

    Args:
        params (list): Tableaux de paramètres, modifiés en place.
        grads (list): Gradients de même forme.
        state (AdamState): Moments et compteur, mis à jour en place.

    Raises:
        UsageError: Si les formes ne correspondent pas.
        TrainingError: Si un gradient n'est pas fini ; rien n'est modifié.

    Returns:
        AdamState: L'état mis à jour.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("Parameter, gradient and moment lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g) or p.shape != state.m[i].shape:
            raise UsageError(f"Shape mismatch at parameter {i}", details={'param': p.shape, 'grad': np.shape(g)})
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient at parameter {i}", field=str(i))
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


class Adam:
    """Adam sur un ensemble de modules ; invalide leurs caches après chaque pas."""

    def __init__(self, modules, extra=(), lr=3e-4):
        self.modules = [m for m in modules if m is not None]
        self.extra = list(extra)
        self.state = AdamState.for_params(self.parameters(), lr=lr)

    def parameters(self):
        params = []
        for module in self.modules:
            params.extend(module.parameters())
        return params + self.extra

    def step(self, grads):
        adam_step(self.parameters(), grads, self.state)
        for module in self.modules:
            module.touch()


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


def relative_error(analytic, numeric, floor=1e-4):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                                 floor)))


def finite_difference(loss_fn, param, index, eps=1e-5):
    """Dérivée centrée de ``loss_fn`` par rapport à ``param[index]`` (modifié puis restauré)."""
    saved = param[index]
    param[index] = saved + eps
    plus = loss_fn()
    param[index] = saved - eps
    minus = loss_fn()
    param[index] = saved
    return (plus - minus) / (2.0 * eps)


def check_gradients(loss_fn, params, grads, rng, per_tensor=8, eps=1e-5):
    """Compare des gradients analytiques à des différences finies sur des entrées tirées au hasard.

    Returns:
        float: Erreur relative maximale observée.
    """
    worst = 0.0
    for param, grad in zip(params, grads):
        flat_size = param.size
        picks = rng.choice(flat_size, size=min(per_tensor, flat_size), replace=False)
        for flat_index in picks:
            index = np.unravel_index(flat_index, param.shape)
            numeric = finite_difference(loss_fn, param, index, eps)
            worst = max(worst, relative_error(np.asarray(grad[index]), np.asarray(numeric)))
    return worst


def _kink_free(pre_list, margin):
    return all(np.min(np.abs(pre)) > margin for pre in pre_list)


def _dense_case(rng, activation):
    sizes = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 5)))]
    net = DenseNet.build(sizes, activation, activation, rng, dtype=CHECK_DTYPE)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0.0, 0.3, size=layer.bias.shape)
    for _ in range(20):
        x = rng.normal(size=(3, sizes[0]))
        _, cache = dense_forward(net, x)
        if activation is not Activation.RELU or _kink_free(cache.pre, 1e-3):
            break
    projection = rng.normal(size=(3, sizes[-1]))

    def loss():
        y, _ = dense_forward(net, x)
        return float(np.sum(y * projection))

    y, cache = dense_forward(net, x)
    grads, grad_x = dense_backward(net, cache, projection)
    worst = check_gradients(loss, net.parameters(), grads, rng)
    return max(worst, check_gradients(loss, [x], [grad_x], rng))


def _conv_case(rng, activation=Activation.ELU):
    history_len = int(rng.integers(8, 13))
    specs = [(4, 3, 3, 2), (3, 3, 2, 1)]
    stack = ConvStack.build(5, [4, 4], specs, 3, history_len, rng, dtype=CHECK_DTYPE)
    for conv in stack.convs:
        conv.activation = activation
        conv.bias[:] = rng.normal(0.0, 0.3, size=conv.bias.shape)
    for layer in stack.encoder.layers:
        layer.activation = activation
        layer.bias[:] = rng.normal(0.0, 0.3, size=layer.bias.shape)
    for _ in range(20):
        x = rng.normal(size=(2, history_len, 5))
        _, cache = conv_forward(stack, x)
        if activation is not Activation.RELU or _kink_free(cache.encoder.pre + cache.pre, 1e-3):
            break
    projection = rng.normal(size=(2, 3))

    def loss():
        z, _ = conv_forward(stack, x)
        return float(np.sum(z * projection))

    z, cache = conv_forward(stack, x)
    grads, grad_x = conv_backward(stack, cache, projection)
    worst = check_gradients(loss, stack.parameters(), grads, rng)
    return max(worst, check_gradients(loss, [x], [grad_x], rng))


def gradcheck_suite(cases=100, seed=0):
    """Batterie de vérifications par différences finies sur toutes les couches.

    Args:
        cases (int, optional): Nombre de graines tirées par type de couche. Defaults to 100.
        seed (int, optional): Graine de base. Defaults to 0.

    Returns:
        dict: Erreur relative maximale par type de couche.
    """
    worst = {}
    for i in range(cases):
        rng = np.random.default_rng([seed, i])
        for activation in Activation:
            key = f"dense:{activation.value}"
            worst[key] = max(worst.get(key, 0.0), _dense_case(rng, activation))
        for activation in (Activation.ELU, Activation.RELU):
            key = f"conv:{activation.value}"
            worst[key] = max(worst.get(key, 0.0), _conv_case(rng, activation))
    logger.info(f"Gradient check over {cases} seeds: max rel. error {max(worst.values()):.3e}")
    return worst
