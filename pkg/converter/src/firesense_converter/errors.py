"""Error type for malformed source data.

Everything the converter can reject (framing corruption, CRC mismatch,
undecodable protos, missing keys, wrong raster sizes) raises this one
class; the CLI maps it to exit code 2 alongside missing files.
"""


class SourceFormatError(Exception):
    pass
