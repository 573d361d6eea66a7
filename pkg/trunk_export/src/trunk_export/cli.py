"""Command-line entry: export one trunk and verify the written files.

    trunk-export --model vgg16 --out exported/

Exit codes: 0 success, 1 invalid request, 2 runtime failure (decode or
verification). Logs to stderr; files to --out.
"""

import argparse
import logging
import sys

from .errors import ExportError
from .export import SUPPORTED_MODELS, export
from .verify import verify

log = logging.getLogger("trunk_export")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trunk-export",
        description="export a pretrained-style convolutional trunk to an "
                    "interchange file plus preprocessing manifest")
    p.add_argument("--model", required=True,
                   help=f"one of: {', '.join(SUPPORTED_MODELS)}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0,
                   help="weight seed (default 0)")
    p.add_argument("--input-size", type=int, nargs=2, default=(224, 224),
                   metavar=("H", "W"),
                   help="canonical input size recorded in the manifest")
    p.add_argument("--verify-inputs", type=int, default=10,
                   help="random inputs for the post-export check (default 10)")
    p.add_argument("--verify-size", type=int, nargs=2, default=(64, 64),
                   metavar=("H", "W"),
                   help="spatial size of verification inputs (default 64 64)")
    p.add_argument("--skip-verify", action="store_true",
                   help="write the files without the activation cross-check")
    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        model_path, manifest_path = export(args.model, args.out, seed=args.seed,
                                           input_size=tuple(args.input_size))
        log.info("wrote %s and %s", model_path, manifest_path)
        if not args.skip_verify:
            report = verify(model_path, n_inputs=args.verify_inputs,
                            size=tuple(args.verify_size), seed=args.seed + 1)
            log.info("verify %s: max abs diff %.3e over %d inputs "
                     "(tolerance %.0e): PASS", report.model,
                     report.max_abs_diff, report.n_inputs, report.tolerance)
    except ExportError as e:
        log.error("%s", e)
        return 1
    except (RuntimeError, OSError) as e:
        log.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
