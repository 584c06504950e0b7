"""Train the Nano model on the synthetic patch task, end to end on CPU.

Generates the train/test splits, fits the model with early stopping at the
target train accuracy, reports held-out accuracy and saves a checkpoint plus
a line-delimited training log under the output directory.
"""

import argparse
import pathlib

from dualspike.config import TrainConfig
from dualspike.data import SyntheticSpec, generate_split
from dualspike.model import build, save_checkpoint
from dualspike.training import evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--train-count", type=int, default=320)
    ap.add_argument("--test-count", type=int, default=160)
    ap.add_argument("--target-acc", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/nano")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(seed=args.seed, noise=args.noise)
    train_ds = generate_split(spec, args.train_count, "train")
    test_ds = generate_split(spec, args.test_count, "test")

    model = build("Nano", seed=args.seed)
    print(f"Nano: {model.param_count()} parameters, {args.train_count} train samples")

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, target_train_acc=args.target_acc)
    result = train(model, train_ds, cfg, log_path=out / "train.jsonl")

    test_acc = evaluate(model, test_ds.images, test_ds.labels)
    save_checkpoint(model, out / "nano.dskc")

    print(f"epochs run: {result.epochs_run}  train acc: {result.train_accuracy:.3f}  "
          f"test acc: {test_acc:.3f}")
    print(f"checkpoint: {out / 'nano.dskc'}  log: {out / 'train.jsonl'}")
    return 0 if result.train_accuracy >= args.target_acc else 1


if __name__ == "__main__":
    raise SystemExit(main())
