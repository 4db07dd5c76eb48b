"""End-to-end checks of the buildtwin command line.

usage: test_cli.py BUILDTWIN_BINARY CONFIG_DIR
"""

import json
import os
import socket
import subprocess
import sys
import tempfile
import time
import unittest
import urllib.request

BIN = None
CONFIG = None


def run(*args, env=None, timeout=300):
    full_env = dict(os.environ)
    full_env.pop("CBDT_API_TOKEN", None)
    full_env.update(env or {})
    return subprocess.run([BIN, "--log-level", "warn", *args], capture_output=True, text=True,
                          timeout=timeout, env=full_env)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_healthy(url, proc, seconds=60):
    deadline = time.time() + seconds
    while time.time() < deadline:
        if proc.poll() is not None:
            raise AssertionError(f"server exited early: {proc.stderr.read()}")
        try:
            with urllib.request.urlopen(url + "/health", timeout=2) as r:
                if r.status == 200:
                    return
        except OSError:
            time.sleep(0.2)
    raise AssertionError("server never became healthy")


class Offline(unittest.TestCase):
    def test_usage_errors_exit_1(self):
        self.assertEqual(run().returncode, 1)
        self.assertEqual(run("frobnicate").returncode, 1)
        self.assertEqual(run("metrics", "--interval", "daily").returncode, 1)
        self.assertEqual(run("metrics", "--from", "2024-07-01T00:00:00Z", "--to", "2024-07-02T00:00:00Z",
                             "--interval", "fortnightly").returncode, 1)

    def test_unreachable_service_exits_2(self):
        r = run("metrics", "--url", f"http://127.0.0.1:{free_port()}", "--from", "2024-07-01T00:00:00Z",
                "--to", "2024-07-02T00:00:00Z")
        self.assertEqual(r.returncode, 2)
        self.assertIn("code", json.loads(r.stderr.strip().splitlines()[-1]))

    def test_local_io_errors_exit_3(self):
        self.assertEqual(run("export", "--store", "/nonexistent/store").returncode, 3)
        self.assertEqual(run("replay", "--file", "/nonexistent/export.ndjson").returncode, 3)

    def test_simulate_export_replay_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            store_a = os.path.join(tmp, "a")
            r = run("simulate", "--config", os.path.join(CONFIG, "sim.toml"), "--horizon", "6h", "--speed", "0",
                    "--exit", "--store", store_a, "--port", "0")
            self.assertEqual(r.returncode, 0, r.stderr)
            summary = json.loads(r.stdout)
            self.assertGreater(summary["jobs_generated"], 0)
            self.assertEqual(summary["jobs_stored"], summary["jobs_generated"])
            self.assertGreater(summary["predictions"], 0)

            first = os.path.join(tmp, "a.ndjson")
            self.assertEqual(run("export", "--store", store_a, "--out", first).returncode, 0)
            second = os.path.join(tmp, "b.ndjson")
            r = run("replay", "--file", first, "--store", os.path.join(tmp, "b"), "--export", second)
            self.assertEqual(r.returncode, 0, r.stderr)
            replayed = json.loads(r.stdout)
            self.assertEqual(replayed["stored"], summary["jobs_stored"])
            self.assertEqual(replayed["rejected"], 0)
            with open(first, "rb") as a, open(second, "rb") as b:
                self.assertEqual(a.read(), b.read())


class Served(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.port = free_port()
        cls.url = f"http://127.0.0.1:{cls.port}"
        env = dict(os.environ, CBDT_API_TOKEN="cli-token")
        cls.proc = subprocess.Popen(
            [BIN, "--log-level", "warn", "simulate", "--config", os.path.join(CONFIG, "sim.toml"), "--horizon",
             "12h", "--speed", "0", "--port", str(cls.port)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
        wait_healthy(cls.url, cls.proc)

    @classmethod
    def tearDownClass(cls):
        cls.proc.terminate()
        cls.proc.wait(timeout=30)

    def test_metrics_table_and_json(self):
        args = ("metrics", "--url", self.url, "--interval", "hourly", "--from", "2024-07-01T00:00:00Z", "--to",
                "2024-07-01T12:00:00Z")
        r = run(*args)
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("window_start", r.stdout.splitlines()[0])
        body = json.loads(run(*args, "--json").stdout)
        self.assertEqual(len(body["series"]), 12)
        self.assertGreater(sum(w["executions_frequency"] for w in body["series"]), 0)

    def test_metrics_over_an_empty_range(self):
        r = run("metrics", "--url", self.url, "--from", "2030-01-01T00:00:00Z", "--to", "2030-01-03T00:00:00Z")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(len(r.stdout.strip().splitlines()), 1)  # header only

    def test_server_side_errors_exit_2(self):
        r = run("metrics", "--url", self.url, "--from", "2024-07-02T00:00:00Z", "--to", "2024-07-01T00:00:00Z")
        self.assertEqual(r.returncode, 2)
        self.assertEqual(json.loads(r.stderr.strip().splitlines()[-1])["code"], "INVERTED_RANGE")

    def test_backfill_needs_the_token_and_honours_the_limit(self):
        r = run("backfill", "--url", self.url, "--limit", "5")
        self.assertEqual(r.returncode, 2)
        self.assertEqual(json.loads(r.stderr.strip().splitlines()[-1])["code"], "UNAUTHORIZED")
        r = run("backfill", "--url", self.url, "--limit", "5", env={"CBDT_API_TOKEN": "cli-token"})
        self.assertEqual(r.returncode, 0, r.stderr)
        summary = json.loads(r.stdout)
        self.assertEqual(set(summary["projects"]), {"1", "2"})
        for counts in summary["projects"].values():
            self.assertLessEqual(counts["fetched"], 5)

    def test_export_over_http(self):
        r = run("export", "--url", self.url)
        self.assertEqual(r.returncode, 0, r.stderr)
        lines = r.stdout.strip().splitlines()
        self.assertGreater(len(lines), 0)
        self.assertIn("job_id", json.loads(lines[0]))


if __name__ == "__main__":
    if len(sys.argv) < 3:
        print(__doc__)
        sys.exit(2)
    BIN, CONFIG = sys.argv[1], sys.argv[2]
    unittest.main(argv=[sys.argv[0], "-v"])
