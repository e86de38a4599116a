"""Command line entry point: ``asrtl <stage> --config <path> [--set section.key=value ...]``.

Exit codes: 0 success, 2 usage error, 3 config error, 4 missing upstream
artifact, 5 runtime failure.
"""

import argparse
import logging
import sys

from . import pipeline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = pipeline.ConfigError.exit_code
EXIT_MISSING = pipeline.MissingArtifactError.exit_code
EXIT_RUNTIME = pipeline.PipelineError.exit_code


def build_parser():
    p = argparse.ArgumentParser(prog="asrtl", description="Transfer-learning ASR experiment stages.")
    p.add_argument("stage", choices=pipeline.STAGES + ["all"],
                   help="stage to run; 'all' runs every stage in order")
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.overrides)
        stages = pipeline.STAGES if args.stage == "all" else [args.stage]
        for s in stages:
            pipeline.run_stage(s, cfg)
    except pipeline.PipelineError as e:
        print("asrtl: error: %s" % e, file=sys.stderr)
        return e.exit_code
    except Exception as e:  # anything else escaping a stage is a runtime failure
        logging.getLogger("asrtl").debug("stage failed", exc_info=True)
        print("asrtl: runtime failure: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
