"""Action-conditioned next-frame and reward model.

The deterministic network is a convolutional encoder/decoder with skip
connections; the action embedding multiplies the bottleneck and every decoder
layer channel-wise.  Frames come out as a 256-way softmax per pixel channel
(or one real value per channel), rewards as 3 classes for (-1, 0, +1).

The ``stochastic_discrete`` variant adds an inference network that sees the
target frame and emits latent bits (straight-through discretisation, uniform
noise before and bit dropout after), and an LSTM that learns to predict those
bits chunk by chunk so they can be sampled when the target is unknown.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import nn as snn
from .envs import STACK, ReplayBuffer
from .nn import Layer, LayerSpec

REWARD_VALUES = (-1, 0, 1)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "deterministic"  # or "stochastic_discrete"
    frame_height: int = 24
    frame_width: int = 16
    n_actions: int = 3
    downscale_levels: int = 3
    base_channels: int = 16
    max_channels: int = 64
    pixel_head: str = "softmax256"  # or "real_valued"
    latent_bits: int = 32
    bit_chunk: int = 8
    latent_hidden: int = 64
    reward_hidden: int = 64
    dropout: float = 0.15
    dense_dropout: float = 0.2
    loss_clip_l2: float = 10.0
    loss_clip_ce: float = 0.03
    reward_classes: int = 3
    noise_amplitude: float = 1.0
    bit_dropout: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 16

    def __post_init__(self):
        if self.variant not in ("deterministic", "stochastic_discrete"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.pixel_head not in ("softmax256", "real_valued"):
            raise ValueError(f"unknown pixel head {self.pixel_head!r}")
        if self.latent_bits % self.bit_chunk:
            raise ValueError("latent_bits must be divisible by bit_chunk")
        if self.reward_classes != 3:
            raise ValueError("reward_classes must be 3")
        if self.loss_clip_ce <= 0 or self.loss_clip_l2 <= 0:
            raise ValueError("loss clips must be positive")
        step = 2 ** self.downscale_levels
        if self.frame_height % step or self.frame_width % step:
            raise ValueError(
                f"frame {self.frame_height}x{self.frame_width} is not divisible by "
                f"2^{self.downscale_levels}")

    @property
    def stochastic(self) -> bool:
        return self.variant == "stochastic_discrete"

    def channels(self) -> list[int]:
        """Channel count at each resolution, full resolution first."""
        return [min(self.base_channels * 2 ** i, self.max_channels)
                for i in range(self.downscale_levels + 1)]


class _STEBinarize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad


def discretize(pre_bits: Tensor) -> Tensor:
    """Threshold at zero; the backward pass is the identity."""
    return _STEBinarize.apply(pre_bits)


def stack_to_input(stacks: Tensor, dtype: torch.dtype = torch.float32) -> Tensor:
    """uint8 [B, 4, H, W, 3] -> float [B, 12, H, W] in [0, 1]."""
    b, s, h, w, c = stacks.shape
    return stacks.permute(0, 1, 4, 2, 3).reshape(b, s * c, h, w).to(dtype) / 255.0


class ConvBlock(nn.Module):
    """dropout -> (transposed) conv -> layer norm over channels -> relu"""

    def __init__(self, kind, cin, cout, kernel, stride, rate, gen):
        super().__init__()
        self.drop = Layer(LayerSpec("dropout", rate=rate))
        self.conv = Layer(LayerSpec(kind, cin, cout, kernel=kernel, stride=stride), gen)
        self.norm = Layer(LayerSpec("layer_norm", cout, axis=1), gen)

    def forward(self, x, rng=None):
        return torch.relu(self.norm(self.conv(self.drop(x, rng))))


class WorldModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg = config
        gen = torch.Generator().manual_seed(seed)
        ch = cfg.channels()
        k = cfg.downscale_levels
        self.embed = Layer(LayerSpec("conv2d", 3 * STACK, ch[0], name="input_frame_dense"), gen)
        self.down = nn.ModuleList(
            ConvBlock("conv2d", ch[i], ch[i + 1], 4, 2, cfg.dropout, gen) for i in range(k))
        self.middle = nn.ModuleList(
            ConvBlock("conv2d", ch[k], ch[k], 3, 1, cfg.dropout, gen) for _ in range(2))
        self.up = nn.ModuleList(
            ConvBlock("conv2d_transpose", ch[i + 1], ch[i], 4, 2, cfg.dropout, gen)
            for i in reversed(range(k)))
        # one multiplicative action embedding for the bottleneck and each decoder layer
        self.action_embed = nn.ModuleList(
            Layer(LayerSpec("embedding", cfg.n_actions, c), gen) for c in [ch[k]] + ch[1:][::-1])
        for emb in self.action_embed:
            with torch.no_grad():
                emb.params["table"].mul_(0.1).add_(1.0)
        out_ch = 3 * 256 if cfg.pixel_head == "softmax256" else 3
        self.out = Layer(LayerSpec("dense", ch[0], out_ch, name="output_frame_dense"), gen)
        hb, wb = cfg.frame_height >> k, cfg.frame_width >> k
        self.bottleneck_size = ch[k] * hb * wb
        self.reward_hidden = Layer(LayerSpec("dense", self.bottleneck_size, cfg.reward_hidden), gen)
        self.reward_drop = Layer(LayerSpec("dropout", rate=cfg.dense_dropout))
        self.reward_out = Layer(LayerSpec("dense", cfg.reward_hidden, 3), gen)
        if cfg.stochastic:
            self._build_latent(gen)

    def _build_latent(self, gen):
        cfg, ch = self.config, self.config.channels()
        c1, c2 = ch[min(1, len(ch) - 1)], ch[-1]
        self.inf1 = ConvBlock("conv2d", 3 * (STACK + 1), c1, 8, 4, 0.0, gen)
        self.inf2 = ConvBlock("conv2d", c1, c2, 8, 4, 0.0, gen)
        with torch.no_grad():
            probe = torch.zeros(1, 3 * (STACK + 1), cfg.frame_height, cfg.frame_width)
            n_flat = self.inf2(self.inf1(probe)).numel()
        self.inf_action = Layer(LayerSpec("embedding", cfg.n_actions, n_flat), gen)
        with torch.no_grad():
            self.inf_action.params["table"].mul_(0.1).add_(1.0)
        self.inf_out = Layer(LayerSpec("dense", n_flat, cfg.latent_bits, name="pre_bits"), gen)
        self.latent_embed = Layer(LayerSpec("dense", cfg.latent_bits, ch[-1]), gen)
        n_chunk = 2 ** cfg.bit_chunk
        self.lp_context = Layer(LayerSpec("dense", self.bottleneck_size, cfg.latent_hidden), gen)
        self.lp_embed = Layer(LayerSpec("embedding", n_chunk + 1, cfg.latent_hidden), gen)
        self.lp_lstm = Layer(LayerSpec("lstm_cell", cfg.latent_hidden, cfg.latent_hidden), gen)
        self.lp_out = Layer(LayerSpec("dense", cfg.latent_hidden, n_chunk), gen)

    # -- pieces ---------------------------------------------------------
    def encode(self, stacks: Tensor, rng=None):
        x = torch.relu(self.embed(stack_to_input(stacks, self.embed.params["weight"].dtype)))
        skips = [x]
        for block in self.down:
            x = block(x, rng)
            skips.append(x)
        return x, skips

    def posterior(self, stacks, actions, next_frames, rng=None):
        """Pre-discretisation latent values from (stack, action, next frame)."""
        cur = stack_to_input(stacks)
        nxt = next_frames.permute(0, 3, 1, 2).float() / 255.0
        x = self.inf2(self.inf1(torch.cat([cur, nxt], dim=1), rng), rng).flatten(1)
        x = x * self.inf_action(actions)
        return self.inf_out(x)

    def bit_logits(self, bottleneck: Tensor, actions: Tensor, chunks: Tensor) -> Tensor:
        """Teacher-forced chunk logits [B, n_chunks, 2^chunk] given target chunks."""
        h, c = self._lp_init(bottleneck, actions)
        start = torch.full((chunks.shape[0],), 2 ** self.config.bit_chunk, dtype=torch.long)
        prev = torch.cat([start[:, None], chunks[:, :-1]], dim=1)
        out = []
        for j in range(chunks.shape[1]):
            h, c = self.lp_lstm((self.lp_embed(prev[:, j]), (h, c)))
            out.append(self.lp_out(h))
        return torch.stack(out, dim=1)

    def _lp_init(self, bottleneck, actions):
        ctx = torch.tanh(self.lp_context(bottleneck.flatten(1)))
        return ctx, torch.zeros_like(ctx)

    def sample_bits(self, bottleneck, actions, rng=None) -> Tensor:
        cfg = self.config
        n_chunks = cfg.latent_bits // cfg.bit_chunk
        h, c = self._lp_init(bottleneck, actions)
        prev = torch.full((bottleneck.shape[0],), 2 ** cfg.bit_chunk, dtype=torch.long)
        chunks = []
        for _ in range(n_chunks):
            h, c = self.lp_lstm((self.lp_embed(prev), (h, c)))
            probs = torch.softmax(self.lp_out(h), dim=-1)
            if isinstance(rng, (list, tuple)):
                # one numpy stream per row: inverse-CDF draw
                u = torch.as_tensor([g.random() for g in rng], dtype=probs.dtype)
                cdf = probs.cumsum(-1)
                prev = (cdf < u[:, None] * cdf[:, -1:]).sum(-1).clamp(max=probs.shape[-1] - 1)
            else:
                prev = torch.multinomial(probs, 1, generator=rng).squeeze(1)
            chunks.append(prev)
        return chunks_to_bits(torch.stack(chunks, dim=1), cfg.bit_chunk).to(bottleneck.dtype)

    def decode(self, bottleneck, skips, actions, bits=None, rng=None):
        x, reward_logits = self.decode_features(bottleneck, skips, actions, bits, rng)
        return self.pixel_head(x), reward_logits

    def pixel_head(self, x):
        out = self.out(x.permute(0, 2, 3, 1))  # per-pixel dense, channels last
        if self.config.pixel_head == "softmax256":
            out = out.view(*out.shape[:3], 3, 256)
        return out

    @torch.no_grad()
    def decode_frames(self, bottleneck, skips, actions, bits=None):
        """Decoded uint8 next frames and reward logits, without keeping pixel logits.

        The 256-way head runs one sample at a time: the logits of a whole batch
        do not fit in cache, and writing then re-reading them costs about three
        times as much as the head itself.
        """
        x, reward_logits = self.decode_features(bottleneck, skips, actions, bits)
        frames = torch.cat([decode_frames(self.pixel_head(x[i:i + 1]))
                            for i in range(x.shape[0])])
        return frames, reward_logits

    def decode_features(self, bottleneck, skips, actions, bits=None, rng=None):
        """Feature map in front of the pixel head, and reward logits."""
        x = bottleneck
        if bits is not None:
            x = x + self.latent_embed(2 * bits - 1)[:, :, None, None]
        x = x * self.action_embed[0](actions)[:, :, None, None]
        for block in self.middle:
            x = x + block(x, rng)
        feat = x
        r = self.reward_drop(torch.relu(self.reward_hidden(feat.flatten(1))), rng)
        reward_logits = self.reward_out(r)
        for i, block in enumerate(self.up):
            x = x * self.action_embed[i + 1](actions)[:, :, None, None]
            x = block(x, rng) + skips[-2 - i]
        return x, reward_logits

    def forward(self, stacks, actions, bits=None, rng=None):
        bottleneck, skips = self.encode(stacks, rng)
        return self.decode(bottleneck, skips, actions, bits, rng)


def chunks_to_bits(chunks: Tensor, chunk: int) -> Tensor:
    shifts = torch.arange(chunk)
    bits = (chunks[..., None] >> shifts) & 1
    return bits.reshape(chunks.shape[0], -1).float()


def bits_to_chunks(bits: Tensor, chunk: int) -> Tensor:
    weights = 2 ** torch.arange(chunk)
    b = bits.reshape(bits.shape[0], -1, chunk).round().long()
    return (b * weights).sum(-1)


def no_scale_dropout(bits: Tensor, rate: float, rng=None) -> Tensor:
    if rate <= 0:
        return bits
    keep = torch.rand(bits.shape, generator=rng) >= rate
    return bits * keep


def build_model(config: ModelConfig, seed: int = 0) -> WorldModel:
    return WorldModel(config, seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_tensors(stack, action):
    stack = torch.as_tensor(np.asarray(stack))
    single = stack.dim() == 4
    if single:
        stack = stack[None]
    action = torch.as_tensor(np.asarray(action), dtype=torch.long).reshape(-1)
    return stack, action, single


@torch.no_grad()
def predict_next(model: WorldModel, stack, action, bits=None):
    """Frame logits [.., H, W, 3, 256] (or values [.., H, W, 3]) and reward logits [.., 3]."""
    stacks, actions, single = _as_tensors(stack, action)
    if model.config.stochastic and bits is None:
        raise ValueError("stochastic model needs latent bits")
    if not model.config.stochastic and bits is not None:
        raise ValueError("deterministic model takes no latent bits")
    if bits is not None:
        bits = torch.as_tensor(np.asarray(bits), dtype=torch.float32).reshape(len(stacks), -1)
    was = model.training
    model.eval()
    out, rew = model(stacks, actions, bits)
    model.train(was)
    if single:
        return out[0], rew[0]
    return out, rew


def infer_posterior_bits(model: WorldModel, stack, action, next_frame, rng=None,
                         training: bool = False):
    """(pre_bits, bits).  Noise and bit dropout are applied only when ``training``."""
    cfg = model.config
    if not cfg.stochastic:
        raise ValueError("posterior bits exist only for the stochastic_discrete variant")
    stacks, actions, single = _as_tensors(stack, action)
    nxt = torch.as_tensor(np.asarray(next_frame))
    if nxt.dim() == 3:
        nxt = nxt[None]
    pre = model.posterior(stacks, actions, nxt)
    bits = _bits_from_pre(pre, cfg, training, rng)[1]
    if single:
        return pre[0], bits[0]
    return pre, bits


def _bits_from_pre(pre: Tensor, cfg: ModelConfig, training: bool, rng=None):
    """Returns (clean bits, bits fed to the decoder)."""
    if training and cfg.noise_amplitude > 0:
        noise = (torch.rand(pre.shape, generator=rng) * 2 - 1) * cfg.noise_amplitude
        pre = pre + noise
    clean = discretize(pre)
    fed = no_scale_dropout(clean, cfg.bit_dropout, rng) if training else clean
    return clean, fed


@torch.no_grad()
def predict_bits(model: WorldModel, stack, action, rng=None) -> Tensor:
    if not model.config.stochastic:
        raise ValueError("bit predictor exists only for the stochastic_discrete variant")
    stacks, actions, single = _as_tensors(stack, action)
    was = model.training
    model.eval()
    bottleneck, _ = model.encode(stacks)
    bits = model.sample_bits(bottleneck, actions, rng)
    model.train(was)
    return bits[0] if single else bits


# -- losses ---------------------------------------------------------------

def clipped_l2_loss(pred: Tensor, target: Tensor, C: float = 10.0) -> Tensor:
    """mean(max((pred - target)^2, C)); pixels with error below C get no gradient."""
    if C <= 0:
        raise ValueError("C must be positive")
    err = (pred - target.to(pred.dtype)) ** 2
    return torch.clamp(err, min=C).mean()


def clipped_ce_loss(frame_logits: Tensor, target_frame: Tensor, C: float = 0.03,
                    class_dim: int = -1) -> Tensor:
    """mean(max(CE, C)) over pixel channels; logits carry 256 classes on ``class_dim``."""
    if C <= 0:
        raise ValueError("C must be positive")
    ce = per_pixel_ce(frame_logits, target_frame, class_dim)
    return torch.clamp(ce, min=C).mean()


def per_pixel_ce(frame_logits: Tensor, target_frame: Tensor, class_dim: int = -1) -> Tensor:
    logits = frame_logits.movedim(class_dim, -1)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_frame.long().reshape(-1),
                         reduction="none")
    return ce.reshape(target_frame.shape)


def reward_to_class(r) -> Tensor:
    return torch.as_tensor(np.asarray(r), dtype=torch.long) + 1


def class_to_reward(c) -> int:
    return REWARD_VALUES[int(c)]


# -- batches --------------------------------------------------------------

@dataclass
class TrainBatch:
    stacks: Tensor  # uint8 [B, 4, H, W, 3]
    actions: Tensor  # long [B]
    target_frames: Tensor  # uint8 [B, H, W, 3]
    target_rewards: Tensor  # long [B], classes 0..2
    history: Tensor | None = None  # uint8 [B, 4, H, W, 3], the four frames before the stack
    history_actions: Tensor | None = None  # long [B, 4], action producing each stack frame
    replaceable: Tensor | None = None  # bool [B, 4], stack frame has a real predecessor

    def __len__(self):
        return len(self.actions)


def batch_from_positions(buffer: ReplayBuffer, positions) -> TrainBatch:
    stacks, hist, acts, hacts, tgt, rew, repl = [], [], [], [], [], [], []
    for e, t in positions:
        ep = buffer.episodes[e]
        frames = ep.frame_array()
        stacks.append(ep.stack_at(t))
        hist.append(ep.stack_at(t - STACK))
        idx = np.arange(t - STACK, t)
        hacts.append([ep.actions[i] if i >= 0 else 0 for i in idx])
        repl.append(idx + 1 >= 1)
        acts.append(ep.actions[t])
        tgt.append(frames[t + 1])
        rew.append(ep.rewards[t])
    return TrainBatch(
        stacks=torch.from_numpy(np.stack(stacks)),
        actions=torch.as_tensor(acts, dtype=torch.long),
        target_frames=torch.from_numpy(np.stack(tgt)),
        target_rewards=reward_to_class(rew),
        history=torch.from_numpy(np.stack(hist)),
        history_actions=torch.as_tensor(hacts, dtype=torch.long),
        replaceable=torch.as_tensor(np.stack(repl)),
    )


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator,
                 positions=None) -> TrainBatch:
    positions = positions if positions is not None else buffer.positions()
    pick = rng.integers(len(positions), size=batch_size)
    return batch_from_positions(buffer, [positions[i] for i in pick])


def decode_frames(out: Tensor) -> Tensor:
    """Argmax (or rounded value) decoding of model output to uint8 [B, H, W, 3]."""
    if out.dim() == 5:
        # numpy's argmax is several times faster than torch's on CPU
        return torch.from_numpy(np.argmax(out.detach().numpy(), axis=-1).astype(np.uint8))
    return out.round().clamp(0, 255).to(torch.uint8)


@torch.no_grad()
def one_step_frames(model: WorldModel, stacks, actions, rng=None) -> Tensor:
    """Argmax-decoded prediction of the next frame; stochastic bits are sampled."""
    was = model.training
    model.eval()
    bottleneck, skips = model.encode(stacks)
    bits = model.sample_bits(bottleneck, actions, rng) if model.config.stochastic else None
    frames, _ = model.decode_frames(bottleneck, skips, actions, bits)
    model.train(was)
    return frames


def mixing_probability(step: int, first_iter_steps: int) -> float:
    """0 at step 0, linear to 1 at floor(first_iter_steps / 2), then 1."""
    if step < 0:
        raise ValueError("step must be non-negative")
    half = first_iter_steps // 2
    if half <= 0:
        return 1.0
    return min(step / half, 1.0)


@torch.no_grad()
def scheduled_sampling_apply(model: WorldModel, batch: TrainBatch, prob: float,
                             rng: torch.Generator | None = None) -> TrainBatch:
    """Replace each stack frame with probability ``prob`` by the model's one-step prediction."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    mask = torch.rand(batch.stacks.shape[:2], generator=rng) < prob
    if batch.replaceable is not None:
        mask &= batch.replaceable
    if prob == 0.0 or not bool(mask.any()) or batch.history is None:
        return batch
    b_idx, j_idx = torch.nonzero(mask, as_tuple=True)
    window = torch.cat([batch.history, batch.stacks], dim=1)  # 8 frames
    ctx = window[b_idx[:, None], j_idx[:, None] + torch.arange(STACK)]
    acts = batch.history_actions[b_idx, j_idx]
    preds = one_step_frames(model, ctx, acts, rng)
    stacks = batch.stacks.clone()
    stacks[b_idx, j_idx] = preds
    return replace(batch, stacks=stacks)


def _pixel_loss(model: WorldModel, feat: Tensor, targets: Tensor, cfg: ModelConfig) -> Tensor:
    """Clipped pixel loss, one sample at a time so the 256-way logits stay in cache.

    Every sample has the same pixel count, so the mean of per-sample means is
    the batch mean.
    """
    losses = []
    for i in range(feat.shape[0]):
        out = model.pixel_head(feat[i:i + 1])
        if cfg.pixel_head == "softmax256":
            losses.append(clipped_ce_loss(out, targets[i:i + 1], cfg.loss_clip_ce))
        else:
            losses.append(clipped_l2_loss(out, targets[i:i + 1].float(), cfg.loss_clip_l2))
    return torch.stack(losses).mean()


def model_loss(model: WorldModel, batch: TrainBatch, config: ModelConfig | None = None,
               rng: torch.Generator | None = None, training: bool = True):
    """Total loss and its parts: pixel (clipped), reward CE, latent (bit predictor CE)."""
    cfg = config or model.config
    was = model.training
    model.train(training)
    bottleneck, skips = model.encode(batch.stacks, rng)
    parts = {}
    bits = None
    if cfg.stochastic:
        pre = model.posterior(batch.stacks, batch.actions, batch.target_frames, rng)
        clean, bits = _bits_from_pre(pre, cfg, training, rng)
        chunks = bits_to_chunks(clean.detach(), cfg.bit_chunk)
        logits = model.bit_logits(bottleneck, batch.actions, chunks)
        parts["latent"] = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), chunks.reshape(-1))
    feat, reward_logits = model.decode_features(bottleneck, skips, batch.actions, bits, rng)
    model.train(was)
    parts["pixel"] = _pixel_loss(model, feat, batch.target_frames, cfg)
    parts["reward"] = F.cross_entropy(reward_logits, batch.target_rewards)
    total = sum(parts.values())
    return total, parts


# -- training -------------------------------------------------------------

class WorldModelTrainer:
    """Adam over a world model, with a global step driving scheduled sampling."""

    def __init__(self, model: WorldModel, first_iter_steps: int, seed: int = 0):
        self.model = model
        self.config = model.config
        self.opt = torch.optim.Adam(model.parameters(), lr=model.config.learning_rate)
        self.first_iter_steps = first_iter_steps
        self.global_step = 0
        self.torch_rng = torch.Generator().manual_seed(seed)

    def train(self, buffer: ReplayBuffer, n_steps: int, rng: np.random.Generator,
              scheduled_sampling: bool = True) -> list[dict]:
        if buffer.total_interactions == 0:
            raise ValueError("cannot train a world model on an empty buffer")
        positions = buffer.positions()
        trace = []
        self.model.train()
        for _ in range(n_steps):
            batch = sample_batch(buffer, self.config.batch_size, rng, positions)
            prob = mixing_probability(self.global_step, self.first_iter_steps)
            if scheduled_sampling and prob > 0:
                batch = scheduled_sampling_apply(self.model, batch, prob, self.torch_rng)
            total, parts = model_loss(self.model, batch, self.config, self.torch_rng)
            self.opt.zero_grad()
            total.backward()
            self.opt.step()
            self.global_step += 1
            row = {"step": self.global_step, "total": float(total.detach()), "mixing": prob}
            row.update({k: float(v.detach()) for k, v in parts.items()})
            row.setdefault("latent", 0.0)
            trace.append(row)
        return trace

    # -- persistence
    def arrays(self) -> dict[str, np.ndarray]:
        out = {"meta/config": snn.text_array(json.dumps(asdict(self.config), sort_keys=True)),
               "meta/global_step": np.array([self.global_step], dtype=np.int64),
               "meta/first_iter_steps": np.array([self.first_iter_steps], dtype=np.int64),
               "meta/torch_rng": self.torch_rng.get_state().numpy().copy()}
        out.update(snn.module_arrays(self.model, "model/"))
        out.update(snn.optimizer_arrays(self.opt, "optim/"))
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "WorldModelTrainer":
        cfg = ModelConfig(**json.loads(snn.array_text(arrays["meta/config"])))
        model = build_model(cfg)
        snn.load_module_arrays(model, arrays, "model/")
        tr = cls(model, int(arrays["meta/first_iter_steps"][0]))
        snn.load_optimizer_arrays(tr.opt, arrays, "optim/")
        tr.global_step = int(arrays["meta/global_step"][0])
        tr.torch_rng.set_state(torch.from_numpy(np.array(arrays["meta/torch_rng"])))
        return tr

    def save(self, path):
        snn.save_params(path, self.arrays())

    @classmethod
    def load(cls, path) -> "WorldModelTrainer":
        return cls.from_arrays(snn.load_params(path))


def train_world_model(model: WorldModel, buffer: ReplayBuffer, n_steps: int,
                      config: ModelConfig | None = None, rng: np.random.Generator | None = None,
                      first_iter_steps: int | None = None, trainer: WorldModelTrainer | None = None):
    """Run ``n_steps`` Adam updates; returns (model, loss trace)."""
    if buffer.total_interactions == 0:
        raise ValueError("cannot train a world model on an empty buffer")
    rng = rng if rng is not None else np.random.default_rng(0)
    if trainer is None:
        trainer = WorldModelTrainer(model, first_iter_steps or n_steps,
                                    seed=int(rng.integers(2**31)))
    trace = trainer.train(buffer, n_steps, rng)
    return trainer.model, trace


# -- evaluation helpers ---------------------------------------------------

def _pixel_correct(pred: Tensor, target: Tensor) -> Tensor:
    return (pred == target).all(dim=-1)


@torch.no_grad()
def one_step_accuracy(model: WorldModel, buffer: ReplayBuffer, rng=None,
                      batch_size: int = 256) -> float:
    """Fraction of pixels (all three channels) predicted exactly from ground-truth context."""
    positions = buffer.positions()
    correct = total = 0
    for i in range(0, len(positions), batch_size):
        b = batch_from_positions(buffer, positions[i:i + batch_size])
        pred = one_step_frames(model, b.stacks, b.actions, rng)
        ok = _pixel_correct(pred, b.target_frames)
        correct += int(ok.sum())
        total += ok.numel()
    return correct / total


@torch.no_grad()
def rollout_accuracy(model: WorldModel, buffer: ReplayBuffer, horizon: int = 10,
                     rng=None, max_starts: int | None = None,
                     np_rng: np.random.Generator | None = None) -> float:
    """Pixel accuracy of ``horizon``-step self-rollouts driven by the recorded actions."""
    starts = [(e, t) for e, ep in enumerate(buffer.episodes)
              for t in range(STACK - 1, len(ep) - horizon + 1)]
    if max_starts is not None and len(starts) > max_starts:
        np_rng = np_rng if np_rng is not None else np.random.default_rng(0)
        starts = [starts[i] for i in np.sort(np_rng.choice(len(starts), max_starts, replace=False))]
    if not starts:
        raise ValueError(f"no episode segment of length {horizon} to roll out")
    stacks = torch.from_numpy(np.stack([buffer.episodes[e].stack_at(t) for e, t in starts]))
    correct = total = 0
    for h in range(horizon):
        acts = torch.as_tensor([buffer.episodes[e].actions[t + h] for e, t in starts])
        truth = torch.from_numpy(np.stack(
            [buffer.episodes[e].frame_array()[t + h + 1] for e, t in starts]))
        pred = one_step_frames(model, stacks, acts, rng)
        ok = _pixel_correct(pred, truth)
        correct += int(ok.sum())
        total += ok.numel()
        stacks = torch.cat([stacks[:, 1:], pred[:, None]], dim=1)
    return correct / total


@torch.no_grad()
def heldout_pixel_ce(model: WorldModel, buffer: ReplayBuffer, batch_size: int = 256,
                     bits: str = "posterior", rng=None) -> float:
    """Mean unclipped per-pixel-channel CE on every transition in ``buffer``.

    For the stochastic variant ``bits`` selects posterior (inferred from the
    target, no noise or dropout) or predicted (sampled from the bit predictor).
    """
    positions = buffer.positions()
    was = model.training
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(positions), batch_size):
        b = batch_from_positions(buffer, positions[i:i + batch_size])
        bottleneck, skips = model.encode(b.stacks)
        z = None
        if model.config.stochastic:
            if bits == "posterior":
                z = discretize(model.posterior(b.stacks, b.actions, b.target_frames))
            else:
                z = model.sample_bits(bottleneck, b.actions, rng)
        out, _ = model.decode(bottleneck, skips, b.actions, z)
        ce = per_pixel_ce(out, b.target_frames)
        total += float(ce.sum())
        n += ce.numel()
    model.train(was)
    return total / n
