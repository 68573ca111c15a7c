"""
SPOL Run Browser
Streamlit viewer for the artifacts of one localization pipeline run.
"""

import logging
import os

import streamlit as st

from src.storage import MissingArtifactError
from src.viewer import RunSummary

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Page configuration
st.set_page_config(
    page_title="SPOL - Run Browser",
    page_icon="🔎",
    layout="wide",
    initial_sidebar_state="expanded"
)


class RunBrowserApp:
    """Main application class for browsing a run directory."""

    def __init__(self):
        self.run_dir = None
        self.summary = None
        self._initialize_session()

    def _initialize_session(self):
        """Initialize session state variables."""
        if 'run_dir' not in st.session_state:
            st.session_state.run_dir = os.getenv("SPOL_OUT_DIR", "runs/default")

    def render_sidebar(self):
        """Pick the run directory and show the report."""
        with st.sidebar:
            st.markdown("### 🔎 Run")
            st.session_state.run_dir = st.text_input("Output directory", st.session_state.run_dir)
            self.run_dir = st.session_state.run_dir

            if not os.path.isdir(self.run_dir):
                st.warning("Directory does not exist yet. Run `python -m src pipeline --out DIR` first.")
                return

            self.summary = RunSummary(self.run_dir)
            st.markdown("---")
            st.markdown("### 📊 Localization")
            metrics = self.summary.metrics()
            if metrics is None:
                st.text("⚠️ no report.json yet")
            else:
                st.metric("Top-1 Loc", f"{metrics['top1_loc']:.1%}")
                st.metric("Top-5 Loc", f"{metrics['top5_loc']:.1%}")
                st.metric("GT-known Loc", f"{metrics['gt_known_loc']:.1%}")
                st.caption(f"{metrics['n_images']} test images")

    def render_losses(self):
        curves = self.summary.loss_curves()
        if curves.empty:
            st.info("No training logs in this run.")
            return
        st.line_chart(curves)

    def render_test_images(self):
        indices = self.summary.test_indices()
        if not indices:
            st.info("No records.csv yet; run the infer stage.")
            return
        index = st.select_slider("Test image", options=indices)
        try:
            panel = self.summary.panel(index)
        except MissingArtifactError as e:
            st.error(str(e))
            return
        left, right = st.columns(2)
        left.image(panel.boxes, caption="prediction (red) vs ground truth (green)", use_container_width=True)
        if panel.mask is not None:
            right.image(panel.mask, caption="predicted mask", use_container_width=True)

    def render_train_images(self):
        files = self.summary.store.list_files("pseudo", "*.png")
        if not files:
            st.info("No pseudo labels in this run.")
            return
        index = st.select_slider("Training image", options=[int(p.stem) for p in files])
        panel = self.summary.train_panel(index)
        cols = st.columns(3)
        cols[0].image(panel.boxes, caption="image and ground truth", use_container_width=True)
        if panel.cam is not None:
            cols[1].image(panel.cam, caption="enhanced CAM", use_container_width=True)
        if panel.pseudo is not None:
            cols[2].image(panel.pseudo, caption="pseudo label (white FG, gray conflict)", use_container_width=True)

    def run(self):
        """Run the main application."""
        try:
            st.markdown("## 🔎 SPOL Run Browser")
            self.render_sidebar()
            if self.summary is None:
                return
            losses, test, train = st.tabs(["Training", "Test predictions", "Pseudo labels"])
            with losses:
                self.render_losses()
            with test:
                self.render_test_images()
            with train:
                self.render_train_images()

        except Exception as e:
            logger.error(f"Application error: {e}")
            st.error(f"Could not render this run: {e}")


# Run the application
if __name__ == "__main__":
    app = RunBrowserApp()
    app.run()
