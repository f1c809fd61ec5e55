"""Brute-force decoding and closed-form parameter counts."""

import itertools

import numpy as np

PAD, BOS, EOS = 0, 1, 2


def all_captions(vocab_size, max_len):
    """Every sequence a decoder may emit: BOS, then up to max_len-1 generated tokens.

    EOS may only come last; a sequence cut at max_len may lack it.
    """
    words = [t for t in range(vocab_size) if t not in (PAD, BOS, EOS)]
    out = []
    for n in range(0, max_len - 1):
        for body in itertools.product(words, repeat=n):
            out.append([BOS, *body, EOS])
    for body in itertools.product(words, repeat=max_len - 1):
        out.append([BOS, *body])
    return out


def sequence_logprob(next_logprobs, seq):
    """``next_logprobs(prefix) -> log-prob vector`` summed along ``seq``."""
    total = 0.0
    for t in range(1, len(seq)):
        total += float(next_logprobs(seq[:t])[seq[t]])
    return total


def exhaustive_top_k(next_logprobs, vocab_size, max_len, k):
    scored = [(sequence_logprob(next_logprobs, s), s) for s in all_captions(vocab_size, max_len)]
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored[:k]


def census(d, heads, d_ff, vocab, feat_r, feat_s, enc_layers, dec_layers, fusion):
    """Trainable parameter count of a model, written out term by term."""
    attn = 4 * d * d                    # w_q, w_k, w_v, w_o, no biases
    ffn = d * d_ff + d_ff + d_ff * d + d
    norm = 2 * d
    text = vocab * d + d * vocab + vocab   # embedding, output head weight + bias
    if fusion == "baseline":
        enc = attn + ffn + 3 * norm
        dec = 2 * attn + ffn + 6 * norm
        return feat_r * d + d + enc_layers * enc + dec_layers * dec + text
    enc = 2 * attn + ffn + 10 * norm       # shared attention pair + ffn, 5 norms per stream
    dec = 2 * attn + ffn + 7 * norm        # text attn, shared cross attn + ffn; 2 text, 1 shared, 2+2 private norms
    dec += {"dnm": 2 * d + 2, "add": 0, "concat": 2 * d * d}[fusion]
    return feat_r * d + d + feat_s * d + d + enc_layers * enc + dec_layers * dec + text
