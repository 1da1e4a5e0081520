import os

from alpineer import io_utils

from vesselprune import settings
from vesselprune.vessel_tree import VesselNode, VesselTree

SWC_HEADER = "# id kind x y z radius parent\n"


class SwcParseError(ValueError):
    """Raised for a malformed SWC data line.

    Args:
        line_number (int): 1-based line number of the offending line
        message (str): what is wrong with it
    """

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


def parse_swc(text):
    """Parses SWC text into a `VesselTree`, preserving node order.

    Lines starting with `#` and blank lines are skipped. Every other line needs the 7 fields
    `id kind x y z radius parent`.

    Args:
        text (bytes | str): the SWC content

    Returns:
        VesselTree:
            the parsed forest

    Raises:
        SwcParseError:
            for a wrong field count or non-numeric field
        SwcStructureError:
            for dangling parents, duplicate ids or cycles
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")

    nodes = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise SwcParseError(line_number, f"expected 7 fields, found {len(fields)}")
        try:
            node_id, kind, parent = int(fields[0]), int(fields[1]), int(fields[6])
            x, y, z, radius = (float(f) for f in fields[2:6])
        except ValueError as err:
            raise SwcParseError(line_number, f"non-numeric field ({err})") from err
        nodes.append(VesselNode(node_id, kind, (x, y, z), radius, parent))

    return VesselTree(tuple(nodes))


def serialize_swc(tree: VesselTree) -> bytes:
    """Writes a forest as SWC text with 9 significant digits per coordinate.

    Args:
        tree (VesselTree): the forest

    Returns:
        bytes:
            UTF-8 SWC content, one data line per node in node order
    """
    fmt = settings.SWC_FLOAT_FORMAT
    lines = [SWC_HEADER]
    for n in tree.nodes:
        coords = " ".join(fmt.format(c) for c in (*n.pos, n.radius))
        lines.append(f"{n.id} {n.kind} {coords} {n.parent}\n")
    return "".join(lines).encode("utf-8")


def read_swc(swc_path):
    """Reads an SWC file.

    Args:
        swc_path (str | PathLike): path to the SWC file

    Returns:
        VesselTree:
            the parsed forest
    """
    io_utils.validate_paths(swc_path)

    with open(swc_path, mode="rb") as f:
        return parse_swc(f.read())


def write_swc(swc_path, tree: VesselTree):
    """Writes a forest to an SWC file. Raises an error if the directory doesn't exist.

    Args:
        swc_path (str | PathLike): full path to write the SWC file
        tree (VesselTree): the forest to save
    """
    io_utils.validate_paths(os.path.dirname(os.path.abspath(swc_path)))

    with open(swc_path, mode="wb") as f:
        f.write(serialize_swc(tree))
