"""Shared builders and loop-level oracles for the test modules."""

import math
from pathlib import Path

from lmalign.encoder import EncoderConfig, LoraConfig

FIXTURES = Path(__file__).parent / "fixtures"


def small_config(tokenizer, **kw):
    base = dict(
        vocab_size=tokenizer.vocab_size,
        d_model=16,
        n_layers=2,
        n_heads=2,
        max_text_len=48,
        n_prompts=3,
        d_joint=8,
        lora=LoraConfig(rank=2, alpha=4.0, dropout=0.0),
    )
    base.update(kw)
    return EncoderConfig(**base)


# independent loop oracles for the losses


def loop_contrastive(V, T, tau):
    """Direct double-loop evaluation with math.fsum."""
    n = len(V)
    S = [[tau * math.fsum(V[i][k] * T[j][k] for k in range(len(V[i]))) for j in range(n)] for i in range(n)]
    i2t = t2i = 0.0
    for i in range(n):
        m = max(S[i])
        i2t -= S[i][i] - m - math.log(math.fsum(math.exp(S[i][j] - m) for j in range(n)))
        col = [S[j][i] for j in range(n)]
        mc = max(col)
        t2i -= S[i][i] - mc - math.log(math.fsum(math.exp(c - mc) for c in col))
    return i2t, t2i


def loop_kl_rows(P_logits, Q_logits):
    total = 0.0
    for p_row, q_row in zip(P_logits, Q_logits):
        mp, mq = max(p_row), max(q_row)
        zp = math.fsum(math.exp(v - mp) for v in p_row)
        zq = math.fsum(math.exp(v - mq) for v in q_row)
        for a, b in zip(p_row, q_row):
            lp = a - mp - math.log(zp)
            lq = b - mq - math.log(zq)
            total += math.exp(lp) * (lp - lq)
    return total


def loop_distill(S_s, S_t, tau_d):
    n = len(S_s)
    s = [[tau_d * v for v in row] for row in S_s]
    t = [[tau_d * v for v in row] for row in S_t]
    sT = [[s[j][i] for j in range(n)] for i in range(n)]
    tT = [[t[j][i] for j in range(n)] for i in range(n)]
    return loop_kl_rows(t, s) + loop_kl_rows(tT, sT)
