"""Smoke test for the edat_py extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/edat_py-*.whl
"""

import edat_py as edat


def simple_example():
    sums = []

    def main(rt):
        if rt.rank == 0:
            def task1(ctx, events):
                ctx.fire(None, 1, "event1")
                ctx.fire([33], 1, "event2", kind="int")

            rt.submit([], task1)
        else:
            rt.submit([(0, "event1")], lambda ctx, ev: ctx.fire([100], "self", "event3", kind="int"))
            rt.submit([(0, "event2"), (1, "event3")], lambda ctx, ev: sums.append(ev[0].value[0] + ev[1].value[0]))

    diags = edat.launch(main, ranks=2)
    assert sums == [133], sums
    assert all(d["terminated"] for d in diags), diags
    print("simple example: sum=133")


def reduction(ranks):
    total = []

    def main(rt):
        if rt.rank == 0:
            rt.submit([("all", "reduce")], lambda ctx, ev: total.append(sum(e.value[0] for e in ev)))
        rt.fire([rt.rank], 0, "reduce")

    edat.launch(main, ranks=ranks, seed=ranks)
    assert total == [ranks * (ranks - 1) // 2], total
    print(f"reduction over {ranks} ranks: {total[0]}")


def wait_and_locks():
    seen = {}

    def holder(ctx, _):
        ctx.lock("state")
        ctx.submit([("self", "paused")], prober)
        ctx.fire(None, "self", "paused")
        events = ctx.wait([("self", "go")])
        seen["resumed"] = events[0].value
        seen["held"] = ctx.held_locks()

    def prober(ctx, _):
        ctx.lock("state")
        seen["probe"] = ctx.held_locks()
        ctx.unlock("state")
        ctx.fire([7], "self", "go")

    edat.launch(lambda rt: rt.submit([], holder), ranks=1, workers=2)
    assert seen == {"probe": ["state"], "resumed": [7], "held": ["state"]}, seen
    print("wait released the lock and held it again on resume")


def shared_counter(updates):
    class Counter:
        value = 0

    counter = Counter()

    def main(rt):
        if rt.rank == 0:
            def bump(ctx, ev):
                c = ev[1].value
                c.value += 1
                if c.value < updates:
                    ctx.fire(c, "self", "data", kind="address")

            rt.submit([(1, "values"), ("self", "data")], bump, persistent=True)
            rt.fire(counter, "self", "data", kind="address")
        else:
            for i in range(updates):
                rt.fire([i], 0, "values")

    edat.launch(main, ranks=2, workers=4)
    assert counter.value == updates, counter.value
    print(f"event-guarded counter: {counter.value} updates")


def task_errors_surface():
    def main(rt):
        rt.submit([], lambda ctx, ev: 1 / 0)

    try:
        edat.launch(main, ranks=1)
    except ZeroDivisionError:
        print("task exception re-raised from launch")
    else:
        raise AssertionError("exception was swallowed")


def tcp():
    got = []

    def main(rt):
        rt.submit([("all", "hello")], lambda ctx, ev: got.append([e.source_rank for e in ev]))
        rt.fire(b"hi", "all", "hello")

    edat.launch(main, ranks=3, transport="tcp")
    assert got == [[0, 1, 2]] * 3, got
    print("tcp broadcast reached every rank")


if __name__ == "__main__":
    simple_example()
    for p in (2, 3, 4, 8):
        reduction(p)
    wait_and_locks()
    shared_counter(1000)
    task_errors_surface()
    tcp()
    print("OK")
