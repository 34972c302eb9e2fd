import os
import re
import subprocess
import sys

VERSION_FILE = os.path.join("windfuse", "version.py")


def get_current_version_string():
    """Retrieves the dynamic version string."""
    # Reload in case it was imported before
    import importlib

    import windfuse.version as v

    importlib.reload(v)
    return v.__version__


def pin_version(content: str, version: str) -> str:
    """Replaces the computed __version__ assignment with a literal."""
    return re.sub(r"__version__ = .*", f'__version__ = "{version}"', content)


def build():
    version = get_current_version_string()
    print(f"Building version: {version}")

    with open(VERSION_FILE, "r", encoding="utf-8") as f:
        original_content = f.read()

    try:
        with open(VERSION_FILE, "w", encoding="utf-8") as f:
            f.write(pin_version(original_content, version))

        # A name passed as argument wins over windfuse-{version}
        target_name = sys.argv[1] if len(sys.argv) > 1 else f"windfuse-{version}"

        cmd = [
            "pyinstaller",
            "--noconfirm",
            "--onefile",
            "--console",
            "--name",
            target_name,
            "--collect-submodules",
            "windfuse",
            "main.py",
        ]
        print(f"Running: {' '.join(cmd)}")
        subprocess.check_call(cmd)

        print(f"Build complete. Executable: dist/{target_name}")

    except subprocess.CalledProcessError as e:
        print(f"Build failed: {e}")
        sys.exit(1)
    except Exception as e:
        print(f"An error occurred: {e}")
        sys.exit(1)
    finally:
        print("Reverting version.py...")
        with open(VERSION_FILE, "w", encoding="utf-8") as f:
            f.write(original_content)


if __name__ == "__main__":
    build()
