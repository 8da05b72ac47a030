from importlib.resources import files
import json
from pathlib import Path
import sys
import tempfile
import unittest

from loguru import logger

import fedaudit
from fedaudit.cli import build_parser, main
from fedaudit.enumerations import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_VIOLATION


class TestCli(unittest.TestCase):

    def setUp(self):
        src_path = files(fedaudit)
        root_path = src_path.parents[1]
        self.testdata_path = root_path / "tests" / "test_data"
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()
        logger.remove()
        logger.add(sys.stderr)

    def write_config(self, obj):
        fp = self.out / "config.json"
        fp.write_text(json.dumps(obj))
        return str(fp)

    def test_parser(self):
        args = build_parser().parse_args(["game-check", "--seed", "3", "-vv"])
        self.assertEqual((args.command, args.seed, args.verbose), ("game-check", 3, 2))

    def test_unknown_command(self):
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["train"])

    def test_missing_config(self):
        code = main(["game-check", "--config", str(self.out / "missing.json"), "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONFIG_ERROR)

    def test_invalid_config(self):
        code = main(["detect-sim", "--config", self.write_config({"p": 1}), "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONFIG_ERROR)

    def test_malformed_json(self):
        fp = self.out / "broken.json"
        fp.write_text("{\"seed\": ")
        self.assertEqual(main(["detect-sim", "--config", str(fp)]), EXIT_CONFIG_ERROR)

    def test_game_check_ok(self):
        config = self.write_config({"game": {"n": [10], "p": [2, 3], "B": [0.0]}})
        self.assertEqual(main(["game-check", "--config", config, "--out", str(self.out)]), EXIT_OK)
        self.assertTrue((self.out / "game_check.csv").is_file())

    def test_game_check_violation(self):
        config = self.write_config({"game": {"n": [10], "p": [1, 2], "B": [0.0]}})
        self.assertEqual(main(["game-check", "--config", config, "--out", str(self.out)]), EXIT_VIOLATION)

    def test_detect_sim(self):
        config = self.write_config({"detect": {"grid": [[10, 2, 1]], "trials": 100}})
        self.assertEqual(main(["detect-sim", "--config", config, "--out", str(self.out)]), EXIT_OK)
        self.assertTrue((self.out / "detection.csv").is_file())

    def test_run_rounds_with_cheat(self):
        config = str(self.testdata_path / "config.json")
        self.assertEqual(main(["run-rounds", "--config", config, "--out", str(self.out)]), EXIT_VIOLATION)
        with open(self.out / "round_report.json") as f:
            self.assertEqual(json.load(f)["slashed"], ["w2"])

    def test_bench(self):
        config = str(self.testdata_path / "config.json")
        self.assertEqual(main(["bench", "--config", config, "--out", str(self.out)]), EXIT_OK)
        self.assertTrue((self.out / "fc_fwd_input_size.csv").is_file())
