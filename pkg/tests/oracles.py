"""Independent reference implementations used as test oracles.

Nothing in here imports from ``rhattest``; traces are plain tuples such as
``("ACT", rank, bank, row)``, ``("REF",)``, ``("RFM",)`` and ``("END",)``.
"""

import hashlib


def reference_alerts(cmds, ranks, banks, rows, threshold=16, delay_acts=4,
                     recovery_refs=4, budget=3):
    """Straight-line walk of the four-state alert automaton.

    Returns a list of ``(step, (rank, bank, row), counter)`` alerts.
    """
    counters = {}
    mode = ["normal"] * ranks
    left = [0] * ranks
    alerts = []

    def recover(rank):
        for _ in range(recovery_refs):
            for bank in range(banks):
                # rows never activated hold zero, so row 0 wins unless something beats it
                best_row, best_val = 0, counters.get((rank, bank, 0), 0)
                for (r, b, row), val in counters.items():
                    if r == rank and b == bank and (val > best_val or (val == best_val and row < best_row)):
                        best_row, best_val = row, val
                counters[(rank, bank, best_row)] = 0
        if delay_acts > 0:
            mode[rank] = "delay"
            left[rank] = delay_acts
        else:
            mode[rank] = "normal"

    for step, cmd in enumerate(cmds):
        op = cmd[0]
        if op == "END":
            break
        if op == "REF":
            counters.clear()
            for r in range(ranks):
                mode[r] = "normal"
                left[r] = 0
            continue
        if op == "RFM":
            continue
        _, rank, bank, row = cmd
        key = (rank, bank, row)
        counters[key] = counters.get(key, 0) + 1
        value = counters[key]
        if mode[rank] == "normal":
            if value >= threshold:
                alerts.append((step, key, value))
                if budget > 0:
                    mode[rank] = "pre"
                    left[rank] = budget
                else:
                    recover(rank)
        elif mode[rank] == "pre":
            left[rank] -= 1
            if left[rank] == 0:
                recover(rank)
        elif mode[rank] == "delay":
            left[rank] -= 1
            if left[rank] == 0:
                mode[rank] = "normal"
    return alerts


def reference_chain(secret, items):
    acc = bytes(32)
    for item in [secret, *items]:
        acc = hashlib.sha256(acc + item).digest()
    return acc
