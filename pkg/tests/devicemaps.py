"""Canonical register maps for the three meter families used across tests.

Addresses are fixture-owned (register maps are configuration, not code); the
parameter COUNTS per device are the load-bearing facts: 23 for the CEM-C31
style meter, 29 for the CIRWATT B, 29 for the LACECAL energy analyzer.
"""

from telegw.modbus import RegisterBinding, RegisterCodec


def _b(param, fn, addr, dtype, scale=1.0, unit="", offset=0.0):
    return RegisterBinding(param, fn, addr, RegisterCodec(dtype, "big", scale, offset), unit)


def cem_c31_bindings() -> list[RegisterBinding]:
    b = []
    for i, ph in enumerate(("l1", "l2", "l3")):
        b.append(_b(f"current_{ph}", "holding", 0 + 2 * i, "u32", 0.001, "A"))
    for i, ph in enumerate(("l1", "l2", "l3")):
        b.append(_b(f"voltage_{ph}", "holding", 6 + 2 * i, "u32", 0.1, "V"))
    for i, ph in enumerate(("l1", "l2", "l3")):
        b.append(_b(f"cos_phi_{ph}", "holding", 12 + i, "i16", 0.01, ""))
    for i, ph in enumerate(("l1", "l2", "l3", "total")):
        b.append(_b(f"apparent_power_{ph}", "holding", 16 + 2 * i, "u32", 1.0, "VA"))
    for i, ph in enumerate(("l1", "l2", "l3", "total")):
        b.append(_b(f"active_power_{ph}", "holding", 24 + 2 * i, "i32", 1.0, "W"))
    for i, ph in enumerate(("l1", "l2", "l3", "total")):
        b.append(_b(f"reactive_power_{ph}", "holding", 32 + 2 * i, "i32", 1.0, "var"))
    b.append(_b("energy_imported", "holding", 0x0100, "u32", 0.1, "kWh"))
    b.append(_b("energy_exported", "holding", 0x0102, "u32", 0.1, "kWh"))
    return b


def cirwatt_b_bindings() -> list[RegisterBinding]:
    b = cem_c31_bindings()
    b.append(_b("frequency", "holding", 0x0200, "u16", 0.01, "Hz"))
    b.append(_b("power_factor", "holding", 0x0201, "i16", 0.001, ""))
    for q in range(1, 5):
        b.append(_b(f"reactive_energy_q{q}", "holding", 0x0210 + 2 * (q - 1), "u32", 0.1, "kvarh"))
    return b


_LACECAL_PARAMS = (
    [f"grid_power_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"building_power_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"inverter_power_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"excess_power_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"consumed_energy_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"grid_energy_{p}" for p in ("l1", "l2", "l3", "total")]
    + [f"exported_energy_{p}" for p in ("l1", "l2", "l3", "total")]
    + ["produced_energy"]
)

LACECAL_BLOCK_START = 0x1010


def lacecal_bindings() -> list[RegisterBinding]:
    unit_for = lambda p: "kWh" if "energy" in p else "W"
    return [
        _b(p, "holding", LACECAL_BLOCK_START + 2 * i, "f32", 1.0, unit_for(p))
        for i, p in enumerate(_LACECAL_PARAMS)
    ]


def load_plausible(sim, bindings, base=100.0):
    """Fill the simulator's registers; return {parameter: decoded value}."""
    expect = {}
    for i, b in enumerate(bindings):
        if b.codec.datatype in ("i16", "u16"):
            v = (200 + 7 * i) * b.codec.scale + b.codec.offset
        else:
            v = base + i * 1.25
        words = b.codec.encode(v)
        sim.load(b.address, words, "holding" if b.function == "holding" else "input")
        expect[b.parameter] = b.codec.decode(words)
    return expect
