#!/usr/bin/env python3
"""Serve the generation API for a completed run, plus the mask-studio page.

Starts the JSON API on --port (default 8642) and a static file server for
frontend/ on --ui-port, then prints the studio URL. Build the frontend once
with `cd frontend && npm run build` before using the UI.

Usage: python scripts/serve_studio.py --run-dir runs/desk
"""

import argparse
import functools
import http.server
import threading
import webbrowser
from pathlib import Path

import uvicorn

from maskdiff.genservice import DEFAULT_PORT, create_app


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run-dir", required=True)
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--ui-port", type=int, default=8080)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--open", action="store_true", help="open the studio in a browser")
    args = parser.parse_args()

    frontend = Path(__file__).resolve().parent.parent / "frontend"
    handler = functools.partial(http.server.SimpleHTTPRequestHandler, directory=str(frontend))
    ui_server = http.server.ThreadingHTTPServer((args.host, args.ui_port), handler)
    threading.Thread(target=ui_server.serve_forever, daemon=True).start()

    url = f"http://{args.host}:{args.ui_port}/?service=http://{args.host}:{args.port}"
    print(f"mask studio: {url}")
    if args.open:
        webbrowser.open(url)

    app = create_app(args.run_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
