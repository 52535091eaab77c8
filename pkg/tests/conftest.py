import os

os.environ.setdefault("TCNN_THREADS", "1")

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=int(os.environ["TCNN_THREADS"]))
except ImportError:
    pass
