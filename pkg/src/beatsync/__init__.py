"""Beat-frequency clock recovery from single-photon detection time tags.

Simulate gated or free-running detectors watching a periodic source on an
independent clock, recover the source frequency from the tags, and compare the
results against closed-form spectral predictions.
"""

__version__ = "0.1.0"
