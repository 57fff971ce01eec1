"""kiloland: desk-scale land-simulation stack -- projected domains,
downscaled forcing, surface properties, a gridcell-parallel column driver,
a self-contained NetCDF-classic codec, and a scaling benchmark harness."""

__version__ = "0.1.0"
