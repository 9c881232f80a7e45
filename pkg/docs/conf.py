# Configuration file for the Sphinx documentation builder.
#
# For the full list of options see
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys
from importlib.metadata import version

sys.path.insert(0, os.path.abspath(".."))

# -- Project information -----------------------------------------------------

master_doc = "index"

project = "ecg-survbench"
copyright = "2026, Daniel Beliavskij"
author = "Daniel Beliavskij"

release = version("ecg-survbench")

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
]

napoleon_numpy_docstring = True
napoleon_google_docstring = False

exclude_patterns = ["changes", "_build"]

# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"
html_use_index = True
html_show_sphinx = True
html_search_language = "en"
htmlhelp_basename = "survbenchdoc"

intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
    "scipy": ("https://docs.scipy.org/doc/scipy/", None),
    "pytest": ("https://docs.pytest.org/en/stable/", None),
}
