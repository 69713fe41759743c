"""Closed-form parameter counts for the adapter and ControlNet branches."""


def conv_count(c_in, c_out, k):
    return c_out * c_in * k + c_out


def linear_count(d_in, d_out):
    return d_in * d_out + d_out


def embed_count(kind, W, label_width=64):
    # event activity is projected from the label-embedding width onto the latent width
    return label_width * W if kind == "event" else 0


def adapter_oracle(W, H, E, depth, per_layer_proj=False, kind="loudness"):
    enc = conv_count(W, E, 3) + conv_count(E, E, 3) + conv_count(E, 2 * H, 3)
    proj = depth * linear_count(H, H) if per_layer_proj else 0
    return embed_count(kind, W) + enc + proj + depth * linear_count(H, H)


def stream_count(H, mlp_ratio):
    # adaLN (6 chunks), q/k/v/o, two-layer MLP
    return linear_count(H, 6 * H) + 4 * linear_count(H, H) + linear_count(H, mlp_ratio * H) \
        + linear_count(mlp_ratio * H, H)


def controlnet_oracle(W, H, mlp_ratio, n_mmdit, depth, kind="loudness"):
    streams = 2 * min(depth, n_mmdit) + max(depth - n_mmdit, 0)
    return embed_count(kind, W) + linear_count(W, H) + streams * stream_count(H, mlp_ratio) \
        + depth * linear_count(H, H)
