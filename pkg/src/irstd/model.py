"""Recurrent reusable-convolution segmentation network.

The encoder's 3x3 kernels are shared across all recurrent iterations while
every iteration owns a fresh batch-normalisation bank and a fresh set of
decoder fusion parameters. The decoded full-resolution map of one iteration
re-enters the encoder through the stem's residual adapter. The stacking head
concatenates the decoded maps of all iterations before prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .optim import xavier_init

FUSION_MODES = ("diaam", "concat", "sum", "diaam_no_ca")
FSM_MODES = ("stack", "last_only", "deep_supervision")


@dataclass
class NetworkConfig:
    channels: tuple = (8, 16, 32, 64)
    blocks: tuple = (3, 2, 2, 2)
    iterations: int = 2
    reduction: int = 1
    fusion_mode: str = "diaam"
    fsm_mode: str = "stack"
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)

    @property
    def depth(self):
        return len(self.channels)

    def validate(self):
        if len(self.channels) != len(self.blocks):
            raise ValueError(
                f"channels {self.channels} and blocks {self.blocks} differ in length"
            )
        if self.depth < 2:
            raise ValueError("need at least two depths")
        if any(c < 1 for c in self.channels) or any(b < 1 for b in self.blocks):
            raise ValueError("channels and blocks must be positive")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")
        for c in self.channels[:-1]:
            if c % self.reduction:
                raise ValueError(
                    f"reduction {self.reduction} does not divide attention "
                    f"channel count {c}"
                )
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.fsm_mode not in FSM_MODES:
            raise ValueError(f"unknown fsm_mode {self.fsm_mode!r}")
        return self


class ModelState:
    """Parameter registry plus per-iteration BN statistics."""

    def __init__(self, cfg, dtype=np.float32, untied=False):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.untied = untied
        self.params: dict[str, Parameter] = {}
        self.running: dict[str, np.ndarray] = {}

    @property
    def banks(self):
        return self.cfg.iterations + 1

    def conv_key(self, site, bank):
        """Resolve a convolution site name, honouring the untied test mode."""
        if self.untied and _is_reused(self.cfg, site):
            return f"it{bank}.{site}"
        return site

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _is_reused(cfg, site):
    if site.startswith(("stem.rb", "enc.", "dec.cat.rb")):
        return True
    return cfg.fsm_mode == "deep_supervision" and site.startswith("fsm.rb")


# ---------------------------------------------------------------------------
# construction


def build(cfg, dtype=np.float32, untied=False):
    """Create and Xavier-initialise all parameters for the given config.

    ``untied=True`` gives every recurrent iteration its own copy of the
    shared convolution kernels, initialised identically to the tied build;
    it exists for the weight-tying gradient oracle.
    """
    cfg.validate()
    st = ModelState(cfg, dtype=dtype, untied=untied)
    ch = cfg.channels
    c0 = ch[0]
    banks = st.banks

    def add_conv(site, cout, cin, k, bias):
        shape = (cout, cin, k, k)
        if untied and _is_reused(cfg, site):
            names = [f"it{n}.{site}" for n in range(banks)]
        else:
            names = [site]
        for name in names:
            # seeded by the tied site name so untied copies start identical
            st.params[name + ".w"] = Parameter(
                name + ".w", xavier_init(shape, cfg.seed, site + ".w", dtype)
            )
            if bias:
                st.params[name + ".b"] = Parameter(
                    name + ".b", np.zeros(cout, dtype=dtype)
                )

    def add_bank_conv(site, cout, cin, k):
        # per-iteration 1x1 convolution (decoder fusion), always with bias
        for n in range(banks):
            name = f"it{n}.{site}"
            st.params[name + ".w"] = Parameter(
                name + ".w", xavier_init((cout, cin, k, k), cfg.seed, name + ".w", dtype)
            )
            st.params[name + ".b"] = Parameter(name + ".b", np.zeros(cout, dtype=dtype))

    def add_bank_linear(site, cout, cin):
        for n in range(banks):
            name = f"it{n}.{site}"
            st.params[name + ".w"] = Parameter(
                name + ".w", xavier_init((cout, cin), cfg.seed, name + ".w", dtype)
            )
            st.params[name + ".b"] = Parameter(name + ".b", np.zeros(cout, dtype=dtype))

    def add_bn(site, c, nbanks=banks):
        for n in range(nbanks):
            name = f"it{n}.{site}"
            st.params[name + ".gamma"] = Parameter(name + ".gamma", np.ones(c, dtype=dtype))
            st.params[name + ".beta"] = Parameter(name + ".beta", np.zeros(c, dtype=dtype))
            st.running[name + ".mean"] = np.zeros(c, dtype=dtype)
            st.running[name + ".var"] = np.ones(c, dtype=dtype)

    def add_block(site, cin, cout, force_skip=False, bn_banks=banks):
        add_conv(site + ".conv1", cout, cin, 3, bias=False)
        add_conv(site + ".conv2", cout, cout, 3, bias=False)
        if cin != cout or force_skip:
            add_conv(site + ".skip", cout, cin, 1, bias=True)
        add_bn(site + ".bn1", cout, bn_banks)
        add_bn(site + ".bn2", cout, bn_banks)

    # stem: channel adapter for the raw image, then the shared residual block
    # that feeds both the image path and the recurrent feedback path
    add_conv("stem.proj", c0, cfg.in_channels, 1, bias=True)
    add_block("stem.rb", c0, c0)

    for i, (c, nblocks) in enumerate(zip(ch, cfg.blocks)):
        cin = c0 if i == 0 else ch[i - 1]
        for j in range(nblocks):
            add_block(f"enc.d{i}.b{j}", cin if j == 0 else c, c)

    if cfg.fusion_mode in ("diaam", "diaam_no_ca"):
        for lvl in range(cfg.depth - 1):
            c = ch[lvl]
            add_bank_conv(f"dec.l{lvl}.halve", c, ch[lvl + 1], 1)
            add_bank_conv(f"dec.l{lvl}.gate", c, c, 1)
            if cfg.fusion_mode == "diaam":
                hidden = max(c // cfg.reduction, 1)
                add_bank_linear(f"dec.l{lvl}.mlp1", hidden, c)
                add_bank_linear(f"dec.l{lvl}.mlp2", c, hidden)
    elif cfg.fusion_mode == "sum":
        for i, c in enumerate(ch):
            add_bank_conv(f"dec.sum.p{i}", c0, c, 1)
    else:  # concat: one shared fusion block with per-iteration BN
        add_block("dec.cat.rb", sum(ch), c0)

    # stacking head; its skip always projects because the stacked channel
    # count varies with the iteration setting
    if cfg.fsm_mode == "stack":
        add_block("fsm.rb", banks * c0, c0, force_skip=True, bn_banks=1)
    elif cfg.fsm_mode == "last_only":
        add_block("fsm.rb", c0, c0, force_skip=True, bn_banks=1)
    else:
        add_block("fsm.rb", c0, c0, force_skip=True, bn_banks=banks)
    add_conv("fsm.head", 1, c0, 1, bias=True)
    return st


# ---------------------------------------------------------------------------
# forward pieces


def _bn(st, x, site, bank, train):
    name = f"it{bank}.{site}"
    return ad.batchnorm2d(
        x,
        st.params[name + ".gamma"],
        st.params[name + ".beta"],
        st.running[name + ".mean"],
        st.running[name + ".var"],
        train=train,
    )


def _res_block(st, x, site, bank, train):
    p = st.params
    h = ad.conv2d(x, p[st.conv_key(site + ".conv1", bank) + ".w"])
    h = _bn(st, h, site + ".bn1", bank, train)
    h = ad.relu(h)
    h = ad.conv2d(h, p[st.conv_key(site + ".conv2", bank) + ".w"])
    h = _bn(st, h, site + ".bn2", bank, train)
    skip_key = st.conv_key(site + ".skip", bank)
    if skip_key + ".w" in p:
        s = ad.conv2d(x, p[skip_key + ".w"], p[skip_key + ".b"])
    else:
        s = x
    return ad.relu(ad.add(h, s))


def encoder_pass(st, x, n, train=False):
    """Run iteration ``n`` of the encoder, returning one feature per depth."""
    cfg = st.cfg
    step = 1 << (cfg.depth - 1)
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(
            f"encoder input {x.shape} not divisible by 2^{cfg.depth - 1} spatially"
        )
    feats = []
    h = x
    for i in range(cfg.depth):
        if i > 0:
            h = ad.maxpool2(h)
        for j in range(cfg.blocks[i]):
            h = _res_block(st, h, f"enc.d{i}.b{j}", n, train)
        feats.append(h)
    return feats


def diaam(st, shallow, deep, n, level=None, train=False):
    """Fuse a shallow feature with the upsampled next-deeper feature.

    The deep feature is upsampled x2, channel-halved by a point-wise
    convolution and passed through channel attention; the result is gated by
    a sigmoid projection of the shallow feature and added to it.
    """
    cfg = st.cfg
    if level is None:
        matches = [i for i, c in enumerate(cfg.channels[:-1]) if c == shallow.shape[1]]
        if len(matches) != 1:
            raise ShapeError(
                f"cannot infer fusion level for {shallow.shape[1]} channels; "
                "pass level explicitly"
            )
        level = matches[0]
    c = cfg.channels[level]
    if shallow.shape[1] != c or deep.shape[1] != cfg.channels[level + 1]:
        raise ShapeError(
            f"fusion level {level} expects channels {c}/{cfg.channels[level + 1]}, "
            f"got {shallow.shape[1]}/{deep.shape[1]}"
        )
    if (deep.shape[2] * 2, deep.shape[3] * 2) != (shallow.shape[2], shallow.shape[3]):
        raise ShapeError(
            f"deep feature {deep.shape} is not half the size of shallow {shallow.shape}"
        )
    p = st.params
    pre = f"it{n}.dec.l{level}"
    up = ad.bilinear_up2(deep)
    h = ad.conv2d(up, p[pre + ".halve.w"], p[pre + ".halve.b"])
    if cfg.fusion_mode != "diaam_no_ca":
        w1, b1 = p[pre + ".mlp1.w"], p[pre + ".mlp1.b"]
        w2, b2 = p[pre + ".mlp2.w"], p[pre + ".mlp2.b"]

        def mlp(v):
            return ad.linear(ad.relu(ad.linear(v, w1, b1)), w2, b2)

        att = ad.sigmoid(ad.add(mlp(ad.global_pool(h, "max")), mlp(ad.global_pool(h, "avg"))))
        h = ad.mul(h, att)
    gate = ad.sigmoid(ad.conv2d(shallow, p[pre + ".gate.w"], p[pre + ".gate.b"]))
    return ad.add(shallow, ad.mul(gate, h))


def decode_pass(st, feats, n, train=False):
    """Aggregate encoder features down to a full-resolution C0 map."""
    cfg = st.cfg
    p = st.params
    if cfg.fusion_mode in ("diaam", "diaam_no_ca"):
        d = feats[-1]
        for lvl in range(cfg.depth - 2, -1, -1):
            d = diaam(st, feats[lvl], d, n, level=lvl, train=train)
        return d
    if cfg.fusion_mode == "sum":
        acc = None
        for i, f in enumerate(feats):
            h = f
            for _ in range(i):
                h = ad.bilinear_up2(h)
            pre = f"it{n}.dec.sum.p{i}"
            h = ad.conv2d(h, p[pre + ".w"], p[pre + ".b"])
            acc = h if acc is None else ad.add(acc, h)
        return acc
    ups = []
    for i, f in enumerate(feats):
        h = f
        for _ in range(i):
            h = ad.bilinear_up2(h)
        ups.append(h)
    return _res_block(st, ad.concat_c(ups), "dec.cat.rb", n, train)


def _head(st, x, bank, train):
    h = _res_block(st, x, "fsm.rb", bank, train)
    p = st.params
    return ad.sigmoid(ad.conv2d(h, p["fsm.head.w"], p["fsm.head.b"]))


def forward(st, x, train=False, tape=None):
    """Full multi-iteration pass; returns the prediction map in (0, 1).

    With ``fsm_mode='deep_supervision'`` a list with one prediction per
    iteration is returned (the last entry is the final output).
    """
    cfg = st.cfg
    if isinstance(x, np.ndarray):
        x = Tensor(np.ascontiguousarray(x, dtype=st.dtype), tape=tape)
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape}")
    p = st.params
    h = ad.conv2d(x, p["stem.proj.w"], p["stem.proj.b"])
    decoded = []
    for n in range(st.banks):
        inp = h if n == 0 else decoded[-1]
        s = _res_block(st, inp, "stem.rb", n, train)
        feats = encoder_pass(st, s, n, train=train)
        decoded.append(decode_pass(st, feats, n, train=train))
    if cfg.fsm_mode == "stack":
        cat = decoded[0] if len(decoded) == 1 else ad.concat_c(decoded)
        return _head(st, cat, 0, train)
    if cfg.fsm_mode == "last_only":
        return _head(st, decoded[-1], 0, train)
    return [_head(st, d, n, train) for n, d in enumerate(decoded)]


# ---------------------------------------------------------------------------
# cost counters


def count_params(st):
    """Total learnable parameter count (running statistics excluded)."""
    return sum(p.value.size for p in st.params.values())


def count_flops(st, input_shape=(1, 1, 256, 256)):
    """Multiply-accumulate count for a forward pass at the given resolution.

    Convention: every convolution kernel is counted once at its application
    resolution no matter how many recurrent iterations reuse it, while
    per-iteration fusion convolutions count once per iteration bank. One MAC
    per weight-output product; bias, pooling, activations and normalisation
    are excluded.
    """
    cfg = st.cfg
    n, _, hh, ww = input_shape
    hw = hh * ww
    ch = cfg.channels
    c0 = ch[0]
    banks = st.banks

    def block(cin, cout, res, skip):
        m = 9 * cin * cout * res + 9 * cout * cout * res
        if skip:
            m += cin * cout * res
        return m

    macs = cfg.in_channels * c0 * hw
    macs += block(c0, c0, hw, False)
    for i, (c, nblocks) in enumerate(zip(ch, cfg.blocks)):
        res = hw >> (2 * i)
        cin = c0 if i == 0 else ch[i - 1]
        macs += block(cin, c, res, cin != c)
        macs += (nblocks - 1) * block(c, c, res, False)

    if cfg.fusion_mode in ("diaam", "diaam_no_ca"):
        per_bank = 0
        for lvl in range(cfg.depth - 1):
            res = hw >> (2 * lvl)
            c = ch[lvl]
            per_bank += ch[lvl + 1] * c * res + c * c * res
            if cfg.fusion_mode == "diaam":
                hidden = max(c // cfg.reduction, 1)
                per_bank += 4 * c * hidden
        macs += banks * per_bank
    elif cfg.fusion_mode == "sum":
        macs += banks * sum(c * c0 for c in ch) * hw
    else:
        macs += block(sum(ch), c0, hw, True)

    if cfg.fsm_mode == "stack":
        macs += block(banks * c0, c0, hw, True)
    else:
        macs += block(c0, c0, hw, True)
    macs += c0 * hw
    return n * macs


def untie(cfg, dtype=np.float64):
    """Build the untied reference network for the weight-tying oracle."""
    return build(replace(cfg), dtype=dtype, untied=True)
