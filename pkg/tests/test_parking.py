import threading
import time

from dxnet.parking import Action, ParkingState, Phase, YieldingLock, park_step


def test_work_spins():
    s = ParkingState()
    assert park_step(s, True, now=0.0) is Action.SPIN


def test_escalation_with_defaults():
    s = ParkingState()
    assert park_step(s, False, now=0.0) is Action.SPIN
    assert park_step(s, False, now=0.099) is Action.SPIN
    assert park_step(s, False, now=0.150) is Action.YIELD
    assert s.phase is Phase.YIELD
    assert park_step(s, False, now=1.099) is Action.YIELD
    assert park_step(s, False, now=1.2) is Action.PARK
    assert s.transitions == 2


def test_reset_after_work():
    s = ParkingState()
    park_step(s, False, now=0.0)
    park_step(s, False, now=1.2)
    assert s.phase is Phase.PARK
    assert park_step(s, True, now=1.21) is Action.SPIN
    assert s.phase is Phase.BUSY and s.idle_since is None
    assert park_step(s, False, now=1.22) is Action.SPIN


def test_yielding_lock_excludes_and_times_out():
    lock = YieldingLock(spins=4)
    total = [0]

    def bump():
        for _ in range(2000):
            with lock:
                v = total[0]
                time.sleep(0) if v % 97 == 0 else None
                total[0] = v + 1

    ts = [threading.Thread(target=bump) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert total[0] == 16_000
    assert lock.acquire()
    assert not lock.acquire(False)
    t0 = time.monotonic()
    assert not lock.acquire(True, 0.05)
    assert time.monotonic() - t0 >= 0.05
    lock.release()
    assert not lock.locked()


def test_yielding_lock_backs_a_condition():
    cond = threading.Condition(YieldingLock())
    ready = []

    def waiter():
        with cond:
            cond.wait_for(lambda: ready, 5)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.02)
    with cond:
        ready.append(1)
        cond.notify_all()
    t.join(5)
    assert not t.is_alive()
