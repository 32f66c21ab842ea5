"""Export Keras EfficientNetB0 weights to the safetensors layout blocksel loads.

    python scripts/export_keras_weights.py --out "$BLOCKSEL_CACHE/efficientnet_b0.safetensors"

Tensor names are "<keras layer>/<param>". Convolutions are stored as
(out, in, kh, kw), depthwise kernels as (channels, 1, kh, kw), dense kernels
as (out, in). The Keras input rescaling/normalization layers are not
exported; use `normalization = "imagenet"` in the dataset config instead.

With --check DIR the script also writes a random input batch and the
model's logits (raw little-endian f32) so the Rust forward pass can be
compared against Keras. Combine with --weights none --perturb-bn to test
layouts without downloading anything.
"""

import argparse
import json
import os

import numpy as np


def convert(model):
    import keras

    out = {}
    for layer in model.layers:
        w = layer.get_weights()
        if not w:
            continue
        name = layer.name
        if isinstance(layer, keras.layers.DepthwiseConv2D):
            k = w[0]  # (kh, kw, c, 1)
            out[f"{name}/depthwise_kernel"] = np.transpose(k, (2, 3, 0, 1))
            if len(w) > 1:
                out[f"{name}/bias"] = w[1]
        elif isinstance(layer, keras.layers.Conv2D):
            out[f"{name}/kernel"] = np.transpose(w[0], (3, 2, 0, 1))
            if len(w) > 1:
                out[f"{name}/bias"] = w[1]
        elif isinstance(layer, keras.layers.BatchNormalization):
            for key, value in zip(["gamma", "beta", "moving_mean", "moving_variance"], w):
                out[f"{name}/{key}"] = value
        elif isinstance(layer, keras.layers.Dense):
            out[f"{name}/kernel"] = w[0].T
            out[f"{name}/bias"] = w[1]
        elif isinstance(layer, keras.layers.Normalization):
            continue
        else:
            raise SystemExit(f"unhandled layer {name} ({type(layer).__name__})")
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in out.items()}


def perturb_batch_norm(model, rng):
    import keras

    for layer in model.layers:
        if isinstance(layer, keras.layers.BatchNormalization):
            g, b, m, v = layer.get_weights()
            layer.set_weights([
                rng.uniform(0.5, 1.5, g.shape),
                rng.normal(0, 0.1, b.shape),
                rng.normal(0, 0.1, m.shape),
                rng.uniform(0.5, 2.0, v.shape),
            ])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--weights", default="imagenet", help="'imagenet' or 'none'")
    ap.add_argument("--classes", type=int, default=1000)
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--check", help="directory for a reference input and logits")
    ap.add_argument("--perturb-bn", action="store_true")
    args = ap.parse_args()

    import keras
    from safetensors.numpy import save_file

    weights = None if args.weights == "none" else args.weights
    model = keras.applications.EfficientNetB0(
        weights=weights, classes=args.classes, input_shape=(args.size, args.size, 3)
    )
    rng = np.random.default_rng(0)
    if args.perturb_bn:
        perturb_batch_norm(model, rng)
    tensors = convert(model)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_file(tensors, args.out)
    print(f"wrote {len(tensors)} tensors to {args.out}")

    if args.check:
        os.makedirs(args.check, exist_ok=True)
        # skip rescaling/normalization: feed the stem directly
        stem_in = model.get_layer("stem_conv_pad").input
        head = keras.Model(stem_in, model.get_layer("predictions").output)
        x = rng.normal(0, 1, (2, args.size, args.size, 3)).astype(np.float32)
        logits = head.predict(x, verbose=0)
        np.transpose(x, (0, 3, 1, 2)).astype("<f4").tofile(os.path.join(args.check, "input.f32"))
        logits.astype("<f4").tofile(os.path.join(args.check, "logits.f32"))
        with open(os.path.join(args.check, "meta.json"), "w") as f:
            json.dump({"batch": 2, "size": args.size, "classes": args.classes, "softmax": True}, f)
        print(f"wrote reference input and outputs to {args.check}")


if __name__ == "__main__":
    main()
