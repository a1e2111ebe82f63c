#!/usr/bin/env python3
"""
Startup script for the voxfuse query service
"""

import os
import sys
import uvicorn
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables first
load_dotenv()

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# Set default environment variables (only if not already set)
os.environ.setdefault("PORT", "8000")


def main():
    """Main entry point"""
    port = int(os.getenv("PORT", 8000))
    grid = os.getenv("VOXFUSE_GRID")

    print("Starting voxfuse query service...")
    if grid:
        print(f"Serving grid {grid}")
    else:
        print("VOXFUSE_GRID not set; serving an empty grid")
    if not os.getenv("ADMIN_API_KEY"):
        print("ADMIN_API_KEY not set; /api/edit is disabled")
    print(f"Server: http://localhost:{port}")

    uvicorn.run(
        "voxfuse.main:app",
        host="0.0.0.0",
        port=port,
        reload=os.getenv("VOXFUSE_RELOAD", "0") == "1"
    )


if __name__ == "__main__":
    main()
