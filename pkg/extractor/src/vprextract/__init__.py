"""Dense CNN feature-map exporter producing VPRD files."""

from .export import ConfigError, ExtractorConfig, build_feature_module, export_dense, list_images
from .vprd import expected_payload_bytes, write_dense_file

__version__ = "0.1.0"
