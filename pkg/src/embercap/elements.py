"""Element table used by the structure parsers and the capping rules."""

# symbol -> (atomic number, nominal covalent valence)
ELEMENTS = {
    "H": (1, 1),
    "B": (5, 3),
    "C": (6, 4),
    "N": (7, 3),
    "O": (8, 2),
    "F": (9, 1),
    "Si": (14, 4),
    "P": (15, 3),
    "S": (16, 2),
    "Cl": (17, 1),
}

# sharing count of a missing site -> cap element
CAP_BY_SHARING = {1: "F", 2: "O", 3: "B"}
CAP_VALENCE = {"F": 1, "O": 2, "B": 3}


def check_symbol(symbol):
    if symbol not in ELEMENTS:
        raise ValueError(f"unknown element symbol {symbol!r}")
    return symbol


def composition(symbols, order=None):
    """Hill-like composition string in first-appearance order, e.g. "C15NF12O12"."""
    counts = {}
    for s in symbols:
        counts[s] = counts.get(s, 0) + 1
    keys = order if order is not None else list(counts)
    out = []
    for k in keys:
        n = counts.get(k, 0)
        if n == 0:
            continue
        out.append(k if n == 1 else f"{k}{n}")
    return "".join(out)


def fragment_formula(native_symbols, cap_symbols):
    """Composition with native elements first (C, N, ...) then caps F, O, B."""
    native_order = [s for s in ("C", "N") if s in native_symbols]
    native_order += sorted(set(native_symbols) - set(native_order))
    cap_order = [s for s in ("F", "O", "B") if s in cap_symbols]
    return composition(native_symbols, native_order) + composition(cap_symbols, cap_order)
