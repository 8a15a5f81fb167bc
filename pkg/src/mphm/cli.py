"""Command-line surface: thin argument parsing over the library functions.

Exit codes: 0 success, 2 configuration problem (bad config, bad checkpoint),
3 data problem, 4 numeric failure. Everything else propagates as a traceback
so genuine bugs stay loud.
"""

import argparse
import sys

from .config import load_run_config, run_config_to_text, RunConfig
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mphm", description="Rain streak removal: training, evaluation, tooling."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV with per-image and mean rows")

    p = sub.add_parser("infer", help="derain a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and compare variants along one axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("visualize", help="render diagnostic images")
    p.add_argument("--kind", required=True,
                   choices=["residual_heatmap", "pca_features"])
    p.add_argument("--pred", help="prediction image (residual_heatmap)")
    p.add_argument("--gt", help="reference image (residual_heatmap)")
    p.add_argument("--ckpt", help="checkpoint (pca_features)")
    p.add_argument("--in", dest="input", help="input image (pca_features)")
    p.add_argument("--layer", help="feature hook name (pca_features)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write synthetic rain/norain pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("gen-config", help="write a config file with every default")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _require(args, flags):
    # flags: (cli flag, argparse dest) pairs
    missing = [flag for flag, dest in flags if getattr(args, dest) is None]
    if missing:
        raise ConfigError(
            f"--kind {args.kind} requires " + ", ".join(f"--{n}" for n in missing)
        )


def _dispatch(args) -> int:
    if args.command == "train":
        from .train import train

        summary = train(load_run_config(args.config, args.overrides))
        print(f"trained {summary['steps']} steps, "
              f"final loss {summary['final_loss']:.5f}, "
              f"checkpoint {summary['checkpoint']}")
    elif args.command == "eval":
        from .train import evaluate

        rows = evaluate(args.ckpt, args.data, args.out)
        mean = rows[-1]
        print(f"{len(rows) - 1} images, mean PSNR {mean['psnr']:.2f} dB, "
              f"mean SSIM {mean['ssim']:.4f} -> {args.out}")
    elif args.command == "infer":
        from .train import run_inference

        run_inference(args.ckpt, args.input, args.out)
        print(f"wrote {args.out}")
    elif args.command == "ablate":
        from .train import ablate

        cfg = load_run_config(args.config, args.overrides)
        rows = ablate(cfg, args.axis, args.out)
        for row in rows:
            print(f"{row['variant']:<24} psnr {row['psnr']:6.2f}  "
                  f"ssim {row['ssim']:.4f}  params {row['params_m']:.3f}M  "
                  f"flops {row['flops_g']:.2f}G")
    elif args.command == "visualize":
        from .visualize import pca_features_file, residual_heatmap_file

        if args.kind == "residual_heatmap":
            _require(args, [("pred", "pred"), ("gt", "gt")])
            residual_heatmap_file(args.pred, args.gt, args.out)
        else:
            _require(args, [("ckpt", "ckpt"), ("in", "input"), ("layer", "layer")])
            pca_features_file(args.ckpt, args.input, args.layer, args.out)
        print(f"wrote {args.out}")
    elif args.command == "gen-data":
        from .data import generate_dataset

        names = generate_dataset(args.out, args.n, size=args.size, seed=args.seed)
        print(f"wrote {len(names)} pairs under {args.out}")
    elif args.command == "gen-config":
        with open(args.out, "w") as f:
            f.write(run_config_to_text(RunConfig()))
        print(f"wrote {args.out}")
    elif args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(args.ckpt), host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
