"""Lung-nodule segmentation: median-filter preprocessing, an independently
recurrent network for per-pixel probabilities, and genetic refinement of the
binary mask under a Potts energy."""

__version__ = "0.1.0"
