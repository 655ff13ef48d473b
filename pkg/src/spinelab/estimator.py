"""scikit-learn style wrappers around pretraining and test-time adaptation.

``X`` is a sequence of prompts: :class:`~spinelab.tasks.Prompt`,
:class:`~spinelab.tasks.TaskInstance` or plain token-id sequences. ``fit``
never reads gold answers; ``score`` does, which is why it wants instances.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptConfig, run_adaptation
from .evaluation import greedy_outputs
from .policy import PolicyConfig, TransformerPolicy, generate
from .pretrain import PretrainConfig, pretrain
from .tasks import PAD, Prompt, TaskInstance, extract_answer, grade


def check_prompts(X, vocab_size=None, context_len=None):
    """Validate and normalise ``X`` into a list of :class:`Prompt`."""
    if X is None or isinstance(X, (str, bytes)):
        raise TypeError("X must be a sequence of prompts")
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, TaskInstance):
            x = x.unlabeled()
        if not isinstance(x, Prompt):
            toks = np.asarray(x)
            if toks.ndim != 1 or toks.size == 0 or not np.issubdtype(toks.dtype, np.integer):
                raise ValueError(f"prompt {i} must be a non-empty 1-D integer sequence")
            x = Prompt(f"x{i:05d}", tuple(int(t) for t in toks))
        toks = np.asarray(x.prompt_tokens)
        if toks.size == 0:
            raise ValueError(f"prompt {x.id} is empty")
        if vocab_size is not None and (toks.min() < 0 or toks.max() >= vocab_size):
            raise ValueError(f"prompt {x.id} has token ids outside [0, {vocab_size})")
        if np.any(toks == PAD):
            raise ValueError(f"prompt {x.id} contains the pad token")
        if context_len is not None and toks.size >= context_len:
            raise ValueError(f"prompt {x.id} leaves no room in a context of {context_len}")
        out.append(x)
    return out


def check_instances(X):
    X = list(X)
    if not X or not all(isinstance(x, TaskInstance) for x in X):
        raise TypeError("scoring needs labelled TaskInstance objects")
    return X


class PolicyPretrainer(BaseEstimator):
    """Supervised pretraining; ``fit(instances)`` sets ``policy_``."""

    def __init__(self, embed_dim=64, n_layers=2, n_heads=4, context_len=128, lr=1e-3,
                 batch_size=64, epochs=30, pass_floor=0.6, max_pos_offset=32, seed=0):
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.context_len = context_len
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.pass_floor = pass_floor
        self.max_pos_offset = max_pos_offset
        self.seed = seed

    def _config(self):
        pc = PolicyConfig(context_len=self.context_len, embed_dim=self.embed_dim,
                          n_layers=self.n_layers, n_heads=self.n_heads)
        return PretrainConfig(policy=pc, lr=self.lr, batch_size=self.batch_size,
                              epochs=self.epochs, pass_floor=self.pass_floor,
                              max_pos_offset=self.max_pos_offset, seed=self.seed)

    def fit(self, X, y=None, eval_instances=None):
        X = check_instances(X)
        self.policy_, self.history_ = pretrain(X, self._config(), eval_instances)
        return self


class SpineAdapter(BaseEstimator):
    """Label-free test-time adaptation of a pretrained policy.

    Every :class:`AdaptConfig` field is a constructor parameter, so
    ``get_params``/``set_params`` and ``sklearn.base.clone`` work as usual.
    ``fit(X)`` adapts a copy of ``policy`` on unlabeled prompts, ``predict``
    returns greedy answers (``None`` when no valid answer is produced), and
    ``score`` is greedy Pass@1 against the instances' gold answers.
    """

    def __init__(self, policy=None, method="spine", n_rollouts=8, temperature=0.7, top_p=0.95,
                 max_new_tokens=64, fork_ratio=0.2, q_low=0.1, q_high=0.5, beta_low=0.05,
                 beta_high=0.05, lambda_kl=0.01, kl_scope="auto", clip_eps=0.2, std_eps=1e-6,
                 loss_eps=1e-6, normalization="mask", leave_one_out=False, optimizer="adam",
                 lr=1e-3, adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8, steps=60,
                 prompts_per_step=8, eval_every=5, seed=0, dump_rollouts=False):
        self.policy = policy
        self.method = method
        self.n_rollouts = n_rollouts
        self.temperature = temperature
        self.top_p = top_p
        self.max_new_tokens = max_new_tokens
        self.fork_ratio = fork_ratio
        self.q_low = q_low
        self.q_high = q_high
        self.beta_low = beta_low
        self.beta_high = beta_high
        self.lambda_kl = lambda_kl
        self.kl_scope = kl_scope
        self.clip_eps = clip_eps
        self.std_eps = std_eps
        self.loss_eps = loss_eps
        self.normalization = normalization
        self.leave_one_out = leave_one_out
        self.optimizer = optimizer
        self.lr = lr
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.steps = steps
        self.prompts_per_step = prompts_per_step
        self.eval_every = eval_every
        self.seed = seed
        self.dump_rollouts = dump_rollouts

    def adapt_config(self):
        params = self.get_params(deep=False)
        params.pop("policy")
        return AdaptConfig(**params)

    def fit(self, X, y=None, eval_instances=None, out_dir=None):
        """Adapt on prompts ``X``; ``y`` is ignored (the procedure is label-free)."""
        if not isinstance(self.policy, TransformerPolicy):
            raise TypeError("policy must be a pretrained TransformerPolicy")
        cfg = self.adapt_config()
        pc = self.policy.config
        prompts = check_prompts(X, pc.vocab_size, pc.context_len)
        self.reference_digest_ = self.policy.digest()
        self.policy_, self.records_ = run_adaptation(cfg, prompts, self.policy.copy(),
                                                     eval_instances, out_dir)
        self.n_features_in_ = 1
        return self

    def _fitted_policy(self):
        check_is_fitted(self, "policy_")
        return self.policy_

    def predict(self, X):
        pol = self._fitted_policy()
        prompts = check_prompts(X, pol.config.vocab_size, pol.config.context_len)
        outs = greedy_outputs(pol, prompts, self.max_new_tokens)
        return [extract_answer(r).canonical for r in outs]

    def sample(self, X, rng=None):
        """Sampled rollouts under the adapted policy and this decode setting."""
        pol = self._fitted_policy()
        prompts = check_prompts(X, pol.config.vocab_size, pol.config.context_len)
        cfg = self.adapt_config().decode_config()
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        return generate(pol, [p.prompt_tokens for p in prompts], cfg, rng)

    def score(self, X, y=None):
        X = check_instances(X)
        gold = y if y is not None else [x.gold_answer for x in X]
        preds = self.predict(X)
        return float(np.mean([grade(p, g) for p, g in zip(preds, gold)]))
