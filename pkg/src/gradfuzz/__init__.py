"""Gray-box fuzzer: execution-tree guided gradient descent over
branching-function values of Boolean-valued instructions."""

__version__ = "0.1.0"
