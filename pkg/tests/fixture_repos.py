"""Synthetic repository corpus used by the unit and acceptance suites.

Each builder writes one repository into ``dest`` and returns its ground
truth: the languages, package manager, and stage behavior the repository was
constructed to exhibit. Tests treat that returned manifest as the independent
oracle for discovery and pipeline assertions.
"""

from __future__ import annotations

import shutil
from pathlib import Path


def _write(dest: Path, files: dict[str, str]) -> None:
    for rel, content in files.items():
        path = dest / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")


def build_py_pip(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# greeter\n\nA tiny greeting library. Install the pinned\n"
                     "dependencies and run the unit tests.\n",
        "requirements.txt": "# no external runtime dependencies\n",
        "greeter/__init__.py": 'def greet(name):\n    return f"hello, {name}"\n',
        "tests/__init__.py": "",
        "tests/test_greeter.py": (
            "import unittest\n\nfrom greeter import greet\n\n\n"
            "class GreetTests(unittest.TestCase):\n"
            "    def test_greet(self):\n"
            '        self.assertEqual(greet("repo"), "hello, repo")\n'
        ),
        ".github/workflows/ci.yml": (
            "name: ci\n"
            "on: [push]\n"
            "jobs:\n"
            "  test:\n"
            "    runs-on: ubuntu-latest\n"
            "    steps:\n"
            "      - uses: actions/checkout@v4\n"
            "      - run: python -m unittest discover -s tests -t . -v\n"
            "  publish:\n"
            "    runs-on: ubuntu-latest\n"
            "    steps:\n"
            "      - run: ./upload.sh ${{ secrets.PYPI_TOKEN }}\n"
        ),
    })
    return {
        "name": "py-pip",
        "language": "python",
        "manager": ("pip", "requirements.txt"),
        "expected_repairs": 0,
        "ci_candidate": "python -m unittest discover -s tests -t . -v",
        "excluded_step_feature": "secret",
    }


def build_poetry_missing_dep(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# wordcase\n\nWord-casing helpers. Managed with poetry; the\n"
                     "helper package under libs/ is part of this repository.\n",
        "pyproject.toml": (
            "[tool.poetry]\n"
            'name = "wordcase"\n'
            'version = "0.1.0"\n'
            'description = "word casing helpers"\n'
            "\n"
            "[tool.poetry.dependencies]\n"
            'python = "^3.10"\n'
        ),
        "poetry.lock": "# frozen dependency set; regenerate with the lock tool\n",
        "wordcase/__init__.py": (
            "import textkit\n\n\n"
            "def title(words):\n"
            "    return textkit.shout(words).title()\n"
        ),
        "libs/textkit/setup.py": (
            "from setuptools import find_packages, setup\n\n"
            'setup(name="textkit", version="0.1.0", packages=find_packages())\n'
        ),
        "libs/textkit/textkit/__init__.py": "def shout(s):\n    return s.upper()\n",
        "tests/__init__.py": "",
        "tests/test_wordcase.py": (
            "import unittest\n\nfrom wordcase import title\n\n\n"
            "class TitleTests(unittest.TestCase):\n"
            "    def test_title(self):\n"
            '        self.assertEqual(title("big words"), "Big Words")\n'
        ),
    })
    return {
        "name": "poetry-missing-dep",
        "language": "python",
        "manager": ("poetry", "poetry.lock"),
        "expected_repairs": 1,
        "missing_module": "textkit",
    }


def build_node_yarn(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# summit\n\nSmall arithmetic helpers for node.\n",
        "package.json": (
            "{\n"
            '  "name": "summit",\n'
            '  "version": "1.0.0",\n'
            '  "private": true,\n'
            '  "scripts": {\n'
            '    "test": "node test/run.js"\n'
            "  }\n"
            "}\n"
        ),
        "yarn.lock": "# yarn lockfile v1\n",
        "lib/index.js": "module.exports.sum = (a, b) => a + b;\n",
        "test/run.js": (
            "const assert = require('assert');\n"
            "const { sum } = require('../lib');\n"
            "assert.strictEqual(sum(2, 3), 5);\n"
            "console.log('tests ok');\n"
        ),
    })
    return {
        "name": "node-yarn",
        "language": "javascript",
        "manager": ("yarn", "yarn.lock"),
        "expected_repairs": 0 if shutil.which("yarn") else 1,
    }


def build_make_c(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# hello-c\n\nBuild with make, check with make test.\n",
        "Makefile": (
            "CC ?= cc\n"
            "\n"
            "all: hello\n"
            "\n"
            "hello: main.c\n"
            "\t$(CC) -o hello main.c\n"
            "\n"
            "test: hello\n"
            "\t./hello | grep -q hello-ok\n"
            "\n"
            ".PHONY: all test\n"
        ),
        "main.c": (
            "#include <stdio.h>\n\n"
            "int main(void) {\n"
            '    puts("hello-ok");\n'
            "    return 0;\n"
            "}\n"
        ),
    })
    return {
        "name": "make-c",
        "language": "c",
        "manager": ("make", "Makefile"),
        "expected_repairs": 0,
    }


def build_cargo_bin(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# adder\n\nA rust crate with a unit test.\n",
        "Cargo.toml": (
            "[package]\n"
            'name = "adder"\n'
            'version = "0.1.0"\n'
            'edition = "2021"\n'
        ),
        "src/main.rs": (
            "fn add(a: i32, b: i32) -> i32 {\n    a + b\n}\n\n"
            "fn main() {\n"
            '    println!("2+2={}", add(2, 2));\n'
            "}\n\n"
            "#[cfg(test)]\n"
            "mod tests {\n"
            "    use super::add;\n\n"
            "    #[test]\n"
            "    fn adds() {\n"
            "        assert_eq!(add(2, 3), 5);\n"
            "    }\n"
            "}\n"
        ),
    })
    return {
        "name": "cargo-bin",
        "language": "rust",
        "manager": ("cargo", "Cargo.toml"),
        "expected_repairs": 0,
    }


def build_go_mod(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# mulmod\n\nA go module with a test.\n",
        "go.mod": "module example.com/mulmod\n\ngo 1.21\n",
        "mul.go": (
            "package mulmod\n\n"
            "func Mul(a, b int) int {\n"
            "\treturn a * b\n"
            "}\n"
        ),
        "mul_test.go": (
            "package mulmod\n\n"
            'import "testing"\n\n'
            "func TestMul(t *testing.T) {\n"
            "\tif Mul(2, 3) != 6 {\n"
            '\t\tt.Fatal("bad product")\n'
            "\t}\n"
            "}\n"
        ),
    })
    return {
        "name": "go-mod",
        "language": "go",
        "manager": ("go", "go.mod"),
        "expected_repairs": 0,
        "requires_tool": "go",
    }


def build_cmake_c(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# squarer\n\nConfigure with cmake, run ctest.\n",
        "CMakeLists.txt": (
            "cmake_minimum_required(VERSION 3.16)\n"
            "project(squarer C)\n"
            "add_executable(squarer main.c)\n"
            "enable_testing()\n"
            "add_test(NAME squarer_runs COMMAND squarer)\n"
        ),
        "main.c": (
            "#include <stdio.h>\n\n"
            "int main(void) {\n"
            '    printf("9\\n");\n'
            "    return 0;\n"
            "}\n"
        ),
    })
    return {
        "name": "cmake-c",
        "language": "c",
        "manager": ("cmake", "CMakeLists.txt"),
        "expected_repairs": 0,
        "requires_tool": "cmake",
    }


def build_unfixable(dest: Path) -> dict:
    _write(dest, {
        "README.md": "# doomed\n\nThe build needs a tool that does not exist.\n",
        "Makefile": (
            "all:\n"
            "\tfrobnicate-xyz --init\n"
            "\n"
            "test: all\n"
            "\tfrobnicate-xyz --check\n"
            "\n"
            ".PHONY: all test\n"
        ),
    })
    return {
        "name": "unfixable",
        "language": None,
        "manager": ("make", "Makefile"),
        "expected_repairs": None,
    }


def build_plain_repo(dest: Path) -> dict:
    """Minimal repository for scripted-backend scenarios."""
    _write(dest, {
        "README.md": "# plain\n\nNothing fancy; scripted backends drive the run.\n",
        "tests/check.sh": "#!/bin/sh\nexit 1\n",
    })
    return {"name": "plain", "language": None, "manager": None}


CORPUS_BUILDERS = {
    "py-pip": build_py_pip,
    "poetry-missing-dep": build_poetry_missing_dep,
    "node-yarn": build_node_yarn,
    "make-c": build_make_c,
    "cargo-bin": build_cargo_bin,
    "go-mod": build_go_mod,
    "cmake-c": build_cmake_c,
}

ALL_BUILDERS = {
    **CORPUS_BUILDERS,
    "unfixable": build_unfixable,
    "plain": build_plain_repo,
}

# Host tool each fixture's commands ultimately need. The acceptance suite
# skips a fixture (loudly) when its toolchain is absent from the machine.
CORPUS_REQUIRED_TOOLS = {
    "py-pip": "python3",
    "poetry-missing-dep": "python3",
    "node-yarn": "node",
    "make-c": "make",
    "cargo-bin": "cargo",
    "go-mod": "go",
    "cmake-c": "cmake",
}
